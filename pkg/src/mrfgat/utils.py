"""
Console tables for the command-line reports.
"""
from typing import Dict, List, Optional, Sequence


def _print_class_counts(title: str, class_names: Sequence[str], counts: Dict[str, List[int]]) -> None:
    """
    Prints per-class sample counts, one column per split.

    Args:
        title: The title to display before the table.
        class_names: Class names in label order.
        counts: Per-split lists of counts, indexed by class.
    """
    splits = list(counts)
    width = max([len("class"), *(len(name) for name in class_names)])
    print(f"\n{title}:\n---")
    print(f"{'class':<{width}}  " + "  ".join(f"{split:>6}" for split in splits))
    for index, name in enumerate(class_names):
        row = "  ".join(f"{counts[split][index]:>6}" for split in splits)
        print(f"{name:<{width}}  {row}")


def _print_class_accuracy(
    title: str,
    class_names: Sequence[str],
    per_class: Sequence[Optional[float]],
    support: Sequence[int],
) -> None:
    """Prints per-class accuracy; classes without samples are flagged instead of scored."""
    width = max([len("class"), *(len(name) for name in class_names)])
    print(f"\n{title}:\n---")
    print(f"{'class':<{width}}  {'acc':>7}  {'n':>5}")
    for name, accuracy, count in zip(class_names, per_class, support):
        shown = "no support" if accuracy is None else f"{accuracy:.4f}"
        print(f"{name:<{width}}  {shown:>7}  {count:>5}")


def _print_block_errors(blocks: Dict[str, float], threshold: float) -> None:
    """Prints the worst relative gradient error of each parameter block."""
    width = max([len("block"), *(len(name) for name in blocks)])
    print(f"{'block':<{width}}  {'max rel. error':>14}  status")
    for name, error in blocks.items():
        status = "ok" if error < threshold else "FAIL"
        print(f"{name:<{width}}  {error:>14.3e}  {status}")
