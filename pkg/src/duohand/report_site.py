"""MkDocs report site for duohand.

Turns a set of run directories into an MkDocs project: one overview page with
the comparison table and one page per run.
"""

import logging
import shutil
import subprocess
from pathlib import Path
from typing import Any, Dict, List, Sequence

import yaml

from .report import RunRecord, comparison_rows, render_markdown

logger = logging.getLogger(__name__)


class ReportSiteGenerator:
    """Generates an MkDocs project from finished runs."""

    def __init__(self, site_dir: Path, runs: Sequence[RunRecord], site_name: str = "duohand runs"):
        """Initialize the generator.

        Args:
            site_dir: Directory receiving ``mkdocs.yml`` and ``docs/``.
            runs: Runs to present, in table order.
            site_name: Title of the site.
        """
        self.site_dir = Path(site_dir)
        self.docs_dir = self.site_dir / "docs"
        self.mkdocs_config_file = self.site_dir / "mkdocs.yml"
        self.runs = list(runs)
        self.site_name = site_name

    def _run_page_name(self, run: RunRecord) -> str:
        return f"runs/{run.name}.md"

    def _create_index_file(self) -> None:
        rows = comparison_rows(self.runs)
        content = f"# {self.site_name}\n\n"
        content += "Baseline vs adapted errors in mm; gains are relative to the baseline.\n\n"
        content += render_markdown(rows)
        content += "\n## Runs\n\n"
        for run in self.runs:
            content += f"* [{run.name}]({self._run_page_name(run)})\n"
        with open(self.docs_dir / "index.md", "w") as f:
            f.write(content)

    def _create_run_page(self, run: RunRecord) -> None:
        page = self.docs_dir / self._run_page_name(run)
        page.parent.mkdir(parents=True, exist_ok=True)
        with open(page, "w") as f:
            f.write(f"# {run.name}\n\n")
            f.write(f"**Mode:** `{run.mode}`  \n")
            f.write(f"**Dataset:** `{run.dataset_sha256[:16]}`  \n")
            f.write(f"**Version:** `{run.manifest.version}`  \n")
            f.write(f"**Created:** {run.manifest.created}\n\n")
            if run.baseline is not None:
                f.write("## Baseline\n\n")
                f.write(run.baseline.to_markdown())
                f.write("\n")
            f.write("## Adapted\n\n" if run.baseline is not None else "## Evaluation\n\n")
            f.write(run.adapted.to_markdown())
            if run.manifest.config:
                f.write("\n## Configuration\n\n")
                f.write("```yaml\n%s```\n" % yaml.safe_dump(run.manifest.config, sort_keys=False))

    def generate_markdown(self) -> None:
        """Write all pages under ``docs/``."""
        self.docs_dir.mkdir(parents=True, exist_ok=True)
        self._create_index_file()
        for run in self.runs:
            self._create_run_page(run)

    def create_mkdocs_config(self) -> None:
        """Create the MkDocs configuration file."""
        nav: List[Dict[str, Any]] = [{"Overview": "index.md"}]
        nav.append({"Runs": [{run.name: self._run_page_name(run)} for run in self.runs]})
        config = {
            "site_name": self.site_name,
            "theme": {
                "name": "material",
                "palette": {"primary": "indigo", "accent": "indigo"},
                "features": ["navigation.sections", "toc.integrate"],
            },
            "markdown_extensions": ["tables", "admonition", "toc"],
            "nav": nav,
        }
        with open(self.mkdocs_config_file, "w") as f:
            yaml.safe_dump(config, f, default_flow_style=False, sort_keys=False)

    def generate(self) -> Path:
        """Generate the MkDocs project and return its directory."""
        if self.docs_dir.exists():
            shutil.rmtree(self.docs_dir)
        self.generate_markdown()
        self.create_mkdocs_config()
        logger.info("report site written to %s", self.site_dir)
        return self.site_dir

    def build(self) -> bool:
        """Run ``mkdocs build`` on the generated project.

        Returns:
            True when the static site was built.
        """
        try:
            subprocess.run(["mkdocs", "build"], cwd=self.site_dir, check=True)
        except subprocess.CalledProcessError as e:
            logger.error("error building report site: %s", e)
            return False
        except FileNotFoundError:
            logger.error("MkDocs not found. Install it with 'pip install mkdocs mkdocs-material'.")
            return False
        return True
