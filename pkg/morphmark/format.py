import sys
from typing import Any, List, Mapping, Optional, TextIO

try:
    import colorama  # type: ignore
except ImportError:
    colorama_unavailable = True
else:
    colorama_unavailable = False
    colorama.init(strip=False)

from .synthbench import EvalReport

EPOCH_FIELDS = ("epsilon", "lr", "lambda1", "lambda3", "mean_total", "selected_f", "selected_g")


def format_epoch(stage: str, summary: Mapping[str, Any]) -> str:
    """One progress line per training epoch, e.g. `stage1 epoch 3: lr=0.0001 mean_total=0.41`."""
    values = []
    for name in EPOCH_FIELDS:
        if name in summary:
            value = summary[name]
            values.append(f"{name}={value:.4g}" if isinstance(value, float) else f"{name}={value}")
    return f"{stage} epoch {summary['epoch']}: {' '.join(values)}"


def format_report(report: EvalReport) -> List[str]:
    """Renders an evaluation report as aligned table rows."""
    thresholds = sorted(report.sdr)
    header = ["landmark", f"MRE ({report.unit})"] + [f"SDR<{t:g}" for t in thresholds]
    rows = [header]
    for index, landmark in enumerate(report.per_landmark):
        rows.append(
            [str(index), f"{landmark.mre:.3f}"]
            + [f"{100.0 * landmark.sdr[t]:.1f}%" for t in thresholds]
        )
    rows.append(
        ["all", f"{report.mre:.3f}"] + [f"{100.0 * report.sdr[t]:.1f}%" for t in thresholds]
    )
    widths = [max(len(row[column]) for row in rows) for column in range(len(header))]
    return ["  ".join(cell.rjust(width) for cell, width in zip(row, widths)) for row in rows]


class PlainPrinter:
    """Writes results to `output` and errors to stderr, each through a `{label}` template."""

    def __init__(self, error: str = "", success: str = "", output: Optional[TextIO] = None):
        self.output = output or sys.stdout
        self.templates = {
            "error": error or "{error}: {message}",
            "success": success or "{success}: {message}",
        }

    def label(self, kind: str) -> str:
        return kind.upper()

    def row(self, text: str, header: bool) -> str:
        return text

    def _emit(self, kind: str, message: str, stream: TextIO) -> None:
        print(self.templates[kind].format(**{kind: self.label(kind)}, message=message), file=stream)

    def success(self, message: str) -> None:
        self._emit("success", message, self.output)

    def error(self, message: str) -> None:
        self._emit("error", message, sys.stderr)

    def info(self, message: str) -> None:
        print(message, file=self.output)

    def table(self, rows: List[str]) -> None:
        for index, text in enumerate(rows):
            self.output.write(self.row(text, header=index == 0) + "\n")


class ColorPrinter(PlainPrinter):
    COLORS = {"error": "RED", "success": "GREEN"}

    def label(self, kind: str) -> str:
        color = getattr(colorama.Fore, self.COLORS[kind])
        return f"{color}{kind.upper()}{colorama.Style.RESET_ALL}"

    def row(self, text: str, header: bool) -> str:
        return f"{colorama.Style.BRIGHT}{text}{colorama.Style.RESET_ALL}" if header else text


def create_terminal_printer(
    color: bool, output: Optional[TextIO] = None, error: str = "", success: str = ""
) -> PlainPrinter:
    if color and colorama_unavailable:
        print(
            "\nColored output (--color or color_output) needs the colorama package.\n"
            "Install it directly or through the extra: pip install morphmark[colors]\n",
            file=sys.stderr,
        )
        sys.exit(1)
    printer_class = ColorPrinter if color else PlainPrinter
    return printer_class(error, success, output)
