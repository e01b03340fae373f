"""Collects one verdict per acceptance criterion for the terminal summary."""

TITLES = {
    1: "grid arithmetic",
    2: "visibility boundary",
    3: "merge oracle equivalence",
    4: "end-to-end identity",
    5: "postprocessing ablation ordering",
    6: "downscale degradation",
    7: "evaluator ground truth",
    8: "split fidelity",
    9: "fragment chain pathology",
    10: "determinism",
}
RESULTS: dict[int, tuple[bool, str]] = {}


def check(number: int, ok: bool, detail: str) -> None:
    RESULTS[number] = (bool(ok), detail)
    assert ok, f"criterion {number} ({TITLES[number]}) failed: {detail}"
