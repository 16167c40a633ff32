import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from advcausal.models import Classifier, ClassifierSpec  # noqa: E402
from advcausal.tensor import Tensor  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent


def linear_model(W, b) -> Classifier:
    W = np.asarray(W, dtype=np.float64)
    spec = ClassifierSpec(input_dim=W.shape[1], hidden_dims=(), num_classes=W.shape[0])
    return Classifier(spec, [Tensor(W, requires_grad=True), Tensor(np.asarray(b, dtype=np.float64), requires_grad=True)])


@pytest.fixture
def repo_root() -> Path:
    return ROOT
