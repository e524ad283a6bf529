"""
Console output for the macrostate toolkit using the Rich library
"""
import logging
from typing import Any, Dict, List, Optional

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from config import TOOLKIT_VERSION


def configure_logging(verbose: bool = False, console: Optional[Console] = None) -> None:
    """Route library logging through Rich; DEBUG with --verbose"""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=verbose)],
        force=True,
    )
    # matplotlib is chatty at DEBUG
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


class ToolkitUI:
    """Rich-based console for batch runs"""

    def __init__(self, console: Optional[Console] = None):
        self.console = console or Console()

    def display_welcome(self, command: str):
        """Display run banner"""
        welcome_text = f"""
Macrostate toolkit v{TOOLKIT_VERSION}
Command: {command}

Bins outcomes, estimates P(bin | covariates), clusters rows into
macrostates and runs the downstream causal analyses.
        """
        self.console.print(Panel(
            welcome_text.strip(),
            title="[bold blue]Macrostate Toolkit[/bold blue]",
            border_style="blue"
        ))

    def display_progress(self, description: str):
        """Progress bar for long loops (sweeps, trials)"""
        return Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            console=self.console,
            transient=True,
        )

    def display_frame(self, frame: pd.DataFrame, title: str, max_rows: int = 20, digits: int = 4):
        """Render a DataFrame as a rich table"""
        if frame.empty:
            self.console.print(f"[yellow]{title}: nothing to display[/yellow]")
            return

        table = Table(title=title)
        for column in frame.columns:
            table.add_column(str(column), style="cyan" if column == frame.columns[0] else None)
        for _, row in frame.head(max_rows).iterrows():
            table.add_row(*[self._format_cell(v, digits) for v in row.tolist()])
        self.console.print(table)

        if len(frame) > max_rows:
            self.console.print(f"[dim]Showing first {max_rows} of {len(frame)} rows. Full table exported to CSV.[/dim]")

    def display_profile(self, profile_frame: pd.DataFrame, global_means: Dict[str, float]):
        """Local means per macrostate next to the global means"""
        frame = profile_frame.copy()
        global_row = {c: global_means.get(c, float("nan")) for c in frame.columns}
        global_row["cluster"] = "global"
        global_row["size"] = frame["size"].sum() if "size" in frame else ""
        frame = pd.concat([frame, pd.DataFrame([global_row])], ignore_index=True)
        self.display_frame(frame, "Macrostate profiles (local vs global means)")

    def display_ols(self, result, title: str):
        self.display_frame(result.to_frame(), f"{title}  (n={result.n}, R²={result.r2:.4f})")

    def display_key_values(self, values: Dict[str, Any], title: str):
        table = Table(title=title, show_header=False)
        table.add_column("Field", style="cyan")
        table.add_column("Value", style="green")
        for key, value in values.items():
            table.add_row(str(key), self._format_cell(value, 6))
        self.console.print(table)

    def display_artifacts(self, artifacts: List[Dict[str, str]]):
        table = Table(title="Artifacts")
        table.add_column("Stage", style="magenta")
        table.add_column("File", style="cyan")
        table.add_column("SHA-256", style="dim")
        for artifact in artifacts:
            table.add_row(artifact["stage"], artifact["name"], artifact["sha256"][:16])
        self.console.print(table)

    def _format_cell(self, value: Any, digits: int) -> str:
        if isinstance(value, float):
            return f"{value:.{digits}g}"
        if isinstance(value, (list, tuple)):
            return ", ".join(self._format_cell(v, digits) for v in value)
        return str(value)

    def display_error(self, error_message: str):
        """Display error message"""
        self.console.print(Panel(
            f"[red]❌ Error: {error_message}[/red]",
            title="[red]Error[/red]",
            border_style="red"
        ))

    def display_success(self, message: str):
        """Display success message"""
        self.console.print(f"[green]✅ {message}[/green]")

    def display_info(self, message: str):
        """Display info message"""
        self.console.print(f"[blue]ℹ️  {message}[/blue]")

    def display_warning(self, message: str):
        """Display warning message"""
        self.console.print(f"[yellow]⚠️  {message}[/yellow]")

    def show_processing_step(self, step: str):
        """Show current processing step"""
        self.console.print(f"\n[bold blue]🔄 {step}[/bold blue]")
