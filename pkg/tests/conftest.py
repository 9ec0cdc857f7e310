import numpy as np
import pytest
import torch

from tap.tree import DEFAULT_GLOBAL_TEMPLATES, AttributeTree


def make_tree(num_classes: int = 3, dataset: str = "toyset") -> AttributeTree:
    """Small, fully valid tree used across the suite."""
    classes = ["rose", "tulip", "daisy", "lily", "iris", "peony",
               "orchid", "poppy", "aster", "lotus"][:num_classes]
    attrs = ("Color", "Shape")
    palette = ["red", "yellow", "white", "pink", "purple", "orange",
               "violet", "scarlet", "blue", "cream"]
    form = ["cupped", "star shaped", "flat", "trumpet shaped", "ruffled",
            "bowl shaped", "spurred", "round", "daisy like", "layered"]
    per_class = {}
    for i, c in enumerate(classes):
        per_class[c] = {
            "Color": [f"{c}, which has {palette[i]} petals",
                      f"{c}, which shows a {palette[(i + 1) % 10]} tint"],
            "Shape": [f"{c}, which is {form[i]}",
                      f"{c}, which looks {form[(i + 2) % 10]}",
                      f"{c}, which has a compact head"],
        }
    return AttributeTree(
        dataset_name=dataset,
        attribute_names=attrs,
        per_class=per_class,
        global_context_templates=DEFAULT_GLOBAL_TEMPLATES,
    )


def finite_difference_gradients(fn, params, h: float = 1e-5):
    """Central-difference gradients of a scalar function at float64."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                hi = float(fn())
                flat[i] = orig - h
                lo = float(fn())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * h)
            grads.append(g)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    na = a.norm().item()
    nb = b.norm().item()
    return (a - b).norm().item() / max(na, nb, 1e-12)


def assert_gradients_match(fn, params, tol: float = 1e-4, h: float = 1e-5):
    """Autograd vs central finite differences, per parameter tensor."""
    for p in params:
        assert p.dtype == torch.float64, "gradient checks run in float64"
        p.grad = None
    loss = fn()
    loss.backward()
    numeric = finite_difference_gradients(fn, params, h=h)
    for p, num in zip(params, numeric):
        assert p.grad is not None, "parameter received no gradient"
        err = relative_error(p.grad, num)
        assert err < tol, f"gradient mismatch: relative error {err:.3e}"


@pytest.fixture(scope="session")
def flower_tree() -> AttributeTree:
    return make_tree(10)


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)
