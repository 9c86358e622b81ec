"""Accuracy bookkeeping and the two continual-learning summary metrics.

The accuracy record is lower-triangular: entry (i, j) is the accuracy on
task i measured after learning task j, defined only for i <= j. The final
average accuracy is the mean of the last column; the cumulative average
accuracy averages the running column means over all tasks.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class AccuracyMatrix:
    """Lower-triangular accuracy record over ``num_tasks`` tasks (0-indexed)."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ContractError(f"need at least one task, got {num_tasks}")
        self._values = np.full((num_tasks, num_tasks), np.nan)

    @property
    def num_tasks(self) -> int:
        return self._values.shape[0]

    def set_entry(self, task: int, after_task: int, accuracy: float) -> None:
        if not 0 <= task <= after_task < self.num_tasks:
            raise ContractError(
                f"entry ({task}, {after_task}) outside the lower triangle "
                f"of a {self.num_tasks}-task record"
            )
        if not 0.0 <= accuracy <= 1.0:
            raise ContractError(f"accuracy {accuracy} outside [0, 1]")
        self._values[task, after_task] = accuracy

    def entry(self, task: int, after_task: int) -> float:
        if not 0 <= task <= after_task < self.num_tasks:
            raise ContractError(
                f"entry ({task}, {after_task}) outside the lower triangle"
            )
        return float(self._values[task, after_task])

    def column(self, after_task: int) -> np.ndarray:
        """Accuracies of tasks 0..after_task measured after ``after_task``."""
        if not 0 <= after_task < self.num_tasks:
            raise ContractError(f"column {after_task} out of range")
        return self._values[: after_task + 1, after_task].copy()


def running_average(matrix: AccuracyMatrix, after_task: int) -> float:
    """Mean accuracy over all tasks seen once ``after_task`` is learned."""
    column = matrix.column(after_task)
    if np.isnan(column).any():
        raise ContractError(
            f"column {after_task} has unpopulated entries"
        )
    return float(column.mean())


def faa(matrix: AccuracyMatrix) -> float:
    """Final average accuracy: mean of the last column."""
    return running_average(matrix, matrix.num_tasks - 1)


def caa(matrix: AccuracyMatrix) -> float:
    """Cumulative average accuracy: mean of the running averages."""
    totals = [running_average(matrix, j) for j in range(matrix.num_tasks)]
    return float(np.mean(totals))


# ---------------------------------------------------------------------------
# CSV emission (repr floats so identical runs give identical bytes)
# ---------------------------------------------------------------------------

def write_matrix_csv(path, matrix: AccuracyMatrix) -> None:
    """Lower-triangular layout; cells above the diagonal stay empty."""
    n = matrix.num_tasks
    with open(path, "w") as fh:
        fh.write("task," + ",".join(f"after_{j + 1}" for j in range(n)) + "\n")
        for i in range(n):
            cells = []
            for j in range(n):
                cells.append(repr(matrix.entry(i, j)) if i <= j else "")
            fh.write(f"{i + 1}," + ",".join(cells) + "\n")


def read_matrix_csv(path) -> AccuracyMatrix:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    n = len(lines) - 1
    matrix = AccuracyMatrix(n)
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")[1:]
        for j, cell in enumerate(cells):
            if cell:
                matrix.set_entry(i, j, float(cell))
    return matrix


def write_metrics_csv(path, matrix: AccuracyMatrix) -> None:
    """Running FAA/CAA after each task plus a final summary line."""
    with open(path, "w") as fh:
        fh.write("task,faa_so_far,caa_so_far\n")
        running = []
        for j in range(matrix.num_tasks):
            running.append(running_average(matrix, j))
            fh.write(f"{j + 1},{running[-1]!r},{float(np.mean(running))!r}\n")
        fh.write(f"final,{faa(matrix)!r},{caa(matrix)!r}\n")


def read_final_metrics(path) -> tuple[float, float]:
    with open(path) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    last = lines[-1].split(",")
    if last[0] != "final":
        raise ContractError(f"{path}: missing final summary line")
    return float(last[1]), float(last[2])
