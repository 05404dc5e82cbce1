"""Terminal board for training progress and evaluation results."""
import math
from typing import Optional, Sequence

from blessed import Terminal

from common.models import MetricsReport, ValidationRecord


class Board:
    """A bordered box listing the latest validation rounds."""

    # N[orth], S[outh], E[ast] and W[est] indicate that they have lines
    # joining up, down, right and left respectively.
    CHAR_ES = "┌"
    CHAR_EW = "─"
    CHAR_SW = "┐"
    CHAR_NS = "│"
    CHAR_NE = "└"
    CHAR_NW = "┘"

    HEADER = "episode     loss  ranking     kl_z  kl_mask  val_mrr"

    def __init__(
        self,
        title: str = "GS-NP",
        rows: int = 10,
        term: Optional[Terminal] = None,
    ):
        """Set up the board renderer."""
        self.term = term or Terminal()
        self.title = title
        self.rows = rows
        self.records: list[ValidationRecord] = []
        self.BORDER_COLOR = self.term.bright_green

    def _border_row(self, start: str, middle: str, end: str, width: int) -> str:
        """One line of the border."""
        return (
            self.BORDER_COLOR
            + start
            + middle * (width - 2)
            + end
            + self.term.normal
        )

    def _framed(self, text: str, width: int) -> str:
        return (
            self.BORDER_COLOR
            + self.CHAR_NS
            + self.term.normal
            + text.ljust(width - 2)
            + self.BORDER_COLOR
            + self.CHAR_NS
            + self.term.normal
        )

    @staticmethod
    def format_record(record: ValidationRecord) -> str:
        """Fixed-width columns for a validation round."""
        mrr = "-" if record.val_mrr is None else f"{record.val_mrr:.4f}"
        return (
            f"{record.episode:7d} {record.total:8.4f} {record.ranking:8.4f} "
            f"{record.kl_z:8.4f} {record.kl_mask:8.4f} {mrr:>8}"
        )

    def lines(self, footer: Sequence[str] = ()) -> list[str]:
        """The board as printable lines, newest round last."""
        body = [self.HEADER]
        body += [self.format_record(r) for r in self.records[-self.rows:]]
        body += list(footer)
        width = max(len(self.title), *(len(line) for line in body)) + 4
        pad = math.ceil((width - len(self.title)) / 2)
        return [
            " " * pad + self.term.bold + self.term.blue + self.title
            + self.term.normal,
            self._border_row(self.CHAR_ES, self.CHAR_EW, self.CHAR_SW, width),
            *(self._framed(" " + line, width) for line in body),
            self._border_row(self.CHAR_NE, self.CHAR_EW, self.CHAR_NW, width),
        ]

    def update(self, record: ValidationRecord):
        """Add a round and redraw."""
        self.records.append(record)
        self.draw()

    def draw(self, footer: Sequence[str] = ()):
        """Clear the screen and print the board."""
        print(self.term.home + self.term.clear, end="")
        for line in self.lines(footer):
            print(line)


def report_lines(report: MetricsReport, label: str = "all") -> list[str]:
    """Summary lines of an evaluation report."""
    lines = [
        f"{label}: MRR {report.mrr:.4f}  Hit@1 {report.hit1:.4f}  "
        f"Hit@5 {report.hit5:.4f}  Hit@10 {report.hit10:.4f}  "
        f"({report.n_queries} queries)"
    ]
    for task in report.per_task:
        lines.append(
            f"  {task.relation}: MRR {task.mrr:.4f}  Hit@1 {task.hit1:.4f}  "
            f"({task.n_queries} queries)"
        )
    return lines
