"""Shared record of acceptance outcomes, printed at the end of the run."""

CRITERIA = {
    "A1": "graph matrices vs brute-force neighbour mean",
    "A2": "convolution vs naive loop oracle",
    "A3": "finite-difference gradient check",
    "A4": "identity initialization",
    "A5": "convergence over the corrupted-input baseline",
    "A6": "edge-aware beats tied kernels",
    "A7": "fusion contracts",
    "A8": "determinism of gen/train/eval",
}
RESULTS = {}


def record(key, ok, detail):
    RESULTS[key] = (bool(ok), detail)
    assert ok, f"{key}: {detail}"
