"""Hand-built label/loss fixture shared by the unit and acceptance tests."""

from types import SimpleNamespace

import numpy as np

from decodet.geometry import BBox, RegressionDelta
from decodet.targets import GroundTruth
from decodet.taxonomy import Taxonomy


def taxonomy(assignment):
    k = max(assignment) + 1
    return Taxonomy(len(assignment), k, np.array(assignment), np.zeros((k, 1)))


def pred(sp, cp, deltas):
    return SimpleNamespace(superclass_probs=np.array(sp), class_probs=np.array(cp), deltas=RegressionDelta(*deltas))


# 3 RoIs, 2 ground truths, C=3 classes in K=2 super-classes (class 0 -> 0, classes 1,2 -> 1)
FIXTURE_TAX = [0, 1, 1]
FIXTURE_GTS = [GroundTruth(BBox(0, 0, 10, 10), 1), GroundTruth(BBox(20, 0, 30, 10), 0)]
FIXTURE_ROIS = [BBox(0, 0, 10, 10), BBox(20, 0, 30, 8), BBox(40, 40, 50, 50)]
FIXTURE_PREDS = [
    pred([0.2, 0.7, 0.1], [0.1, 0.8, 0.1], [0.1, 0.0, 0.0, -0.2]),
    pred([0.5, 0.25, 0.25], [0.6, 0.2, 0.2], [0.0, 0.125, 0.0, 0.0]),
    pred([0.1, 0.1, 0.8], [0.3, 0.3, 0.4], [5.0, 5.0, 5.0, 5.0]),
]
