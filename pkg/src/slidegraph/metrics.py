"""Ordinal grading metrics: quadratic weighted kappa, confusion counts and
the Gleason-to-ISUP grade mapping."""

from __future__ import annotations

import numpy as np

from .validation import ContractError, as_labels, require


def confusion(actual, predicted, n_classes: int) -> np.ndarray:
    """N x N count matrix with rows = actual class, columns = predicted."""
    require(n_classes >= 2, "n_classes must be at least 2")
    a = as_labels(actual, n_classes, "actual")
    p = as_labels(predicted, n_classes, "predicted")
    require(a.shape == p.shape, "actual and predicted must have equal length")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (a, p), 1)
    return counts


def kappa_weights(n_classes: int) -> np.ndarray:
    """Quadratic disagreement weights w[i, j] = (i - j)^2 / (N - 1)."""
    idx = np.arange(n_classes, dtype=np.float64)
    return (idx[:, None] - idx[None, :]) ** 2 / (n_classes - 1)


def quadratic_weighted_kappa(actual, predicted, n_classes: int) -> float:
    """Chance-corrected agreement with quadratic penalties.

    The expected matrix E is the outer product of the actual and predicted
    marginals, scaled so its total matches the observed total; kappa is
    1 - sum(w*O) / sum(w*E). When both label vectors are constant and equal
    the ratio is 0/0 and kappa is 1 by convention. The weight matrix's
    overall scale cancels, so the (N-1) denominator in the weights cannot
    change the score.
    """
    observed = confusion(actual, predicted, n_classes).astype(np.float64)
    weights = kappa_weights(n_classes)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    expected *= observed.sum() / expected.sum()
    denom = float((weights * expected).sum())
    if denom == 0.0:
        return 1.0
    return 1.0 - float((weights * observed).sum()) / denom


def accuracy(actual, predicted, n_classes: int) -> float:
    counts = confusion(actual, predicted, n_classes)
    return float(np.trace(counts) / counts.sum())


def isup_grade(primary: int, secondary: int) -> int:
    """Map a (primary, secondary) Gleason pattern pair to ISUP grade 1..5.

    Totals up to 6 map to grade 1; a total of 7 splits on the primary
    pattern (3 + 4 -> 2, 4 + 3 -> 3); 8 maps to 4 and 9-10 to 5.
    """
    for name, value in (("primary", primary), ("secondary", secondary)):
        if not isinstance(value, (int, np.integer)) or not 1 <= int(value) <= 5:
            raise ContractError(f"{name} Gleason pattern must be an integer in 1..5")
    total = int(primary) + int(secondary)
    if total <= 6:
        return 1
    if total == 7:
        return 2 if primary <= 3 else 3
    if total == 8:
        return 4
    return 5


# --- metrics report -----------------------------------------------------------


def format_metrics_block(name: str, rows, n_classes: int) -> str:
    """Render one model's scored slides as the documented text layout.

    ``rows`` is a sequence of (slide_id, actual, predicted, probabilities).
    Per-slide records are tab-separated: slide id, actual, predicted, then
    one probability per class to six decimals. The summary block reports
    slide count, accuracy, quadratic weighted kappa and the confusion
    matrix (one row per actual class).
    """
    rows = list(rows)
    require(len(rows) > 0, "metrics report needs at least one scored slide")
    actual = [r[1] for r in rows]
    predicted = [r[2] for r in rows]
    counts = confusion(actual, predicted, n_classes)
    kappa = quadratic_weighted_kappa(actual, predicted, n_classes)
    lines = [f"== model {name} =="]
    for slide_id, a, p, probs in rows:
        probs = np.asarray(probs, dtype=np.float64)
        require(probs.shape == (n_classes,), "probability vector has wrong length")
        joined = "\t".join(f"{q:.6f}" for q in probs)
        lines.append(f"{slide_id}\t{int(a)}\t{int(p)}\t{joined}")
    lines.append("== summary ==")
    lines.append(f"slides\t{len(rows)}")
    lines.append(f"accuracy\t{np.trace(counts) / counts.sum():.6f}")
    lines.append(f"kappa\t{kappa:.6f}")
    lines.append("confusion")
    for i in range(n_classes):
        lines.append("\t".join(str(int(c)) for c in counts[i]))
    return "\n".join(lines) + "\n"


def parse_metrics_report(text: str) -> dict[str, dict]:
    """Parse a metrics report back into ``{model: {"kappa", "accuracy",
    "slides", "rows", "confusion"}}``."""
    models: dict[str, dict] = {}
    current: dict | None = None
    in_summary = False
    for line in text.splitlines():
        if line.startswith("== model ") and line.endswith(" =="):
            name = line[len("== model ") : -len(" ==")]
            current = models[name] = {"rows": [], "confusion": []}
            in_summary = False
        elif line == "== summary ==":
            in_summary = True
        elif current is None or not line:
            continue
        elif not in_summary:
            parts = line.split("\t")
            current["rows"].append(
                (parts[0], int(parts[1]), int(parts[2]), [float(x) for x in parts[3:]])
            )
        elif line == "confusion":
            continue
        else:
            parts = line.split("\t")
            if parts[0] in ("slides", "accuracy", "kappa"):
                current[parts[0]] = float(parts[1])
            else:
                current["confusion"].append([int(x) for x in parts])
    return models
