"""ROUGE-L: longest-common-subsequence precision/recall/F score."""

from .errors import ParameterError


def lcs_length(a, b):
    """Length of the longest common subsequence (iterative DP, two rows)."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    cur = [0] * (len(b) + 1)
    for x in a:
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev, cur = cur, prev
    return prev[len(b)]


def rouge_l(candidate, reference, beta=1.0):
    """LCS-based ROUGE-L.

    P = LCS/|candidate|, R = LCS/|reference|,
    F = (1 + beta^2) P R / (R + beta^2 P); an empty candidate scores zero
    everywhere, an empty reference is an input error.
    """
    candidate = list(candidate)
    reference = list(reference)
    if not reference:
        raise ParameterError("reference sequence must be nonempty")
    if not candidate:
        return {"precision": 0.0, "recall": 0.0, "f": 0.0}
    lcs = lcs_length(candidate, reference)
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    if precision == 0.0 and recall == 0.0:
        f = 0.0
    else:
        b2 = beta * beta
        f = (1.0 + b2) * precision * recall / (recall + b2 * precision)
    return {"precision": precision, "recall": recall, "f": f}
