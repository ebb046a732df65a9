import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from budgetdetect.segmetrics import (
    Detection,
    GroundTruthSegment,
    GroundTruthSet,
    Segment,
)


def make_detection(start, end, probs, step=1) -> Detection:
    return Detection(Segment(start, end), np.asarray(probs, dtype=float), step)


def class_detection(start, end, class_index, num_labels, confidence=0.8, step=1):
    """Detection with the given argmax class and confidence; the rest of
    the mass spreads uniformly."""
    probs = np.full(num_labels, (1.0 - confidence) / (num_labels - 1))
    probs[class_index] = confidence
    return Detection(Segment(start, end), probs, step)


def make_gts(*triples) -> GroundTruthSet:
    return GroundTruthSet(
        tuple(GroundTruthSegment(Segment(s, e), label) for s, e, label in triples)
    )


def random_ap_fixture(rng, num_labels=4, max_dets=6, max_gts=4):
    """Random small detection/ground-truth pair for metric oracle tests."""
    n_gt = int(rng.integers(1, max_gts + 1))
    # non-overlapping ground truths from sorted cut points
    while True:
        cuts = np.sort(rng.uniform(0.0, 1.0, size=2 * n_gt))
        lengths = cuts[1::2] - cuts[0::2]
        if np.all(lengths > 0.02):
            break
    gts = make_gts(
        *(
            (float(cuts[2 * i]), float(cuts[2 * i + 1]), int(rng.integers(1, num_labels)))
            for i in range(n_gt)
        )
    )
    n_det = int(rng.integers(0, max_dets + 1))
    dets = []
    for step in range(1, n_det + 1):
        lo, hi = np.sort(rng.uniform(0.0, 1.0, size=2))
        probs = rng.dirichlet(np.ones(num_labels))
        dets.append(Detection(Segment(float(lo), float(hi)), probs, step))
    return dets, gts


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
