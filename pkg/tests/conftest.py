import numpy as np
import pytest

from laconv import kernels
from laconv import tensor as T

FD_STEP = 1e-3


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest absolute gap, scaled by the larger of the two gradients' max-norms."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f, arrays, i, step=FD_STEP):
    x = arrays[i]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + step
        hi = f(*arrays)
        flat[j] = old - step
        lo = f(*arrays)
        flat[j] = old
        gflat[j] = (hi - lo) / (2 * step)
    return g


def check_grads(build, arrays, step=FD_STEP, seed=9001):
    """Compare tape gradients of ``build(*tensors)`` against central differences.

    ``build`` returns a Tensor of any shape; it is reduced to a scalar through a
    fixed random projection so every output element contributes. Returns the
    worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build(*[T.Tensor(a) for a in arrays])
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*arrs):
        with T.finite_checks(True):
            return float((build(*[T.Tensor(a) for a in arrs]).data * proj).sum())

    ts = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = build(*ts)
        tape.backward(out, proj.astype(out.dtype))
    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i, step)
        got = np.zeros_like(num) if t.grad is None else t.grad
        worst = max(worst, rel_error(got, num))
    return worst


@pytest.fixture(params=["compiled", "numpy"])
def backend(request):
    """Run a test once per kernel backend (compiled is skipped when not built)."""
    if request.param == "compiled" and kernels.COMPILED_KERNELS is None:
        pytest.skip("compiled kernels not built")
    prev = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class ReluPatterns:
    """Records the on/off pattern of every relu evaluated while active.

    Central differences are meaningless for a coordinate whose +step and -step
    evaluations switch some relu, so the module checker skips those.
    """

    def __init__(self, monkeypatch):
        self.masks = []
        relu, bn = T.relu, kernels.bn_forward

        def relu_rec(x):
            out = relu(x)
            self.masks.append(x.data > 0)
            return out

        def bn_rec(x, gamma, beta, eps, residual=None, relu=False):
            res = bn(x, gamma, beta, eps, residual, relu)
            if relu:
                self.masks.append(res[0] > 0)
            return res

        monkeypatch.setattr(T, "relu", relu_rec)
        monkeypatch.setattr(T, "_relu", relu_rec)
        monkeypatch.setattr(kernels, "bn_forward", bn_rec)

    def run(self, fn):
        self.masks = []
        out = fn()
        return out, self.masks


def check_module_grads(tensors, forward, step=FD_STEP, seed=9001, patterns=None):
    """Finite-difference check for named leaf tensors used inside ``forward()``.

    The tensors are perturbed in place, so ``forward`` can close over modules.
    Returns ({name: relative error}, skipped coordinates, total coordinates);
    coordinates are only skipped when ``patterns`` (a ReluPatterns) shows the
    stencil crossing a relu kink.
    """
    probe = forward()
    proj = np.random.default_rng(seed).standard_normal(probe.shape)
    for t in tensors.values():
        t.grad = None
        t.requires_grad = True
    with T.Tape() as tape:
        tape.backward(forward(), proj)

    def evaluate():
        if patterns is None:
            return float((forward().data * proj).sum()), None
        out, masks = patterns.run(forward)
        return float((out.data * proj).sum()), masks

    errors, skipped, total = {}, 0, 0
    for name, t in tensors.items():
        got = np.zeros_like(t.data) if t.grad is None else t.grad
        num = np.zeros_like(t.data)
        keep = np.ones(t.data.shape, dtype=bool)
        flat, nflat, kflat = t.data.reshape(-1), num.reshape(-1), keep.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            hi, mhi = evaluate()
            flat[j] = old - step
            lo, mlo = evaluate()
            flat[j] = old
            nflat[j] = (hi - lo) / (2 * step)
            if mhi is not None and any((a != b).any() for a, b in zip(mhi, mlo)):
                kflat[j] = False
        skipped += int((~keep).sum())
        total += keep.size
        errors[name] = rel_error(np.where(keep, got, 0.0), np.where(keep, num, 0.0))
    return errors, skipped, total


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
