"""Central-difference gradient checks for the library's modules.

Each scope builds a small module in 64-bit precision, a fixed random
projection of its output as the scalar loss, and compares the taped
gradient with ``(f(x + h) - f(x - h)) / 2h`` at sampled coordinates of
every parameter (and the input).  Batch norm runs in eval mode.

Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
The floor is the larger of ``REL_FLOOR`` and the cancellation noise of the
central difference (``eps * |loss| / h``) scaled so that noise alone costs at
most a tenth of the tolerance; gradients below it are effectively compared
in absolute terms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import tensor as T
from ..moe import MoEFusion
from ..nn import BatchNorm, Conv1x1, DWConv3x3, GroupNorm, Module
from ..segnet import NetworkConfig, PatchMoENet, PatchMoEVSSBlock
from ..ssm import SsmParams, selective_scan
from ..tensor import Tensor
from .train import segmentation_loss

DEFAULT_STEP = 1e-5
REL_FLOOR = 1e-4
# Tolerances per scope: linear ops are checked tightly, the full network is a spot check.
TOLERANCES = {
    "conv1x1": 1e-8,
    "dwconv": 1e-8,
    "group_norm": 1e-6,
    "batch_norm": 1e-8,
    "ssm": 1e-5,
    "moe": 1e-5,
    "vss": 1e-5,
    "net": 1e-4,
}
SCOPES = tuple(TOLERANCES)


@dataclass
class CoordinateError:
    parameter: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradcheckReport:
    scope: str
    tolerance: float
    step: float
    checked: int = 0
    worst: CoordinateError | None = None
    failures: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return self.worst.rel_err if self.worst else 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (f"{status} {self.scope}: {self.checked} coordinates, max rel err "
                f"{self.max_rel_err:.3e} (tol {self.tolerance:.0e})")
        if self.worst is not None:
            w = self.worst
            line += f"; worst {w.parameter}{list(w.index)} analytic={w.analytic:.6e} numeric={w.numeric:.6e}"
        return line

    def lines(self) -> list[str]:
        out = [self.summary()]
        for f in self.failures[:10]:
            out.append(f"  {self.scope} {f.parameter}{list(f.index)}: analytic={f.analytic:.9e} "
                       f"numeric={f.numeric:.9e} rel={f.rel_err:.3e}")
        return out


def rel_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn: Callable[[], Tensor], named: list, scope: str = "custom",
                    tolerance: float = 1e-5, step: float = DEFAULT_STEP, trials: int = 8,
                    seed: int = 0, corrupt: bool = False) -> GradcheckReport:
    """Compare taped and finite-difference gradients of ``loss_fn()``.

    ``named`` lists ``(name, tensor)`` pairs whose ``.data`` is perturbed in
    place; each must have ``requires_grad``.  ``trials`` coordinates are
    drawn per tensor (all of them when the tensor is smaller).  With
    ``corrupt`` the analytic gradient is deliberately skewed, which must make
    the check fail (negative control).
    """
    rng = np.random.default_rng(seed)
    for _, t in named:
        t.zero_grad()
    base = loss_fn()
    T.backward(base)
    noise = np.finfo(np.float64).eps * max(1.0, abs(float(base.data))) / step
    floor = max(REL_FLOOR, 10.0 * noise / tolerance)
    report = GradcheckReport(scope, tolerance, step)
    for name, t in named:
        analytic = t.grad.copy()
        if corrupt:
            analytic = analytic * 1.01 + 1e-3
        flat = t.data.reshape(-1)
        picks = np.arange(flat.size) if flat.size <= trials else rng.choice(flat.size, trials, replace=False)
        for k in picks:
            orig = flat[k]
            flat[k] = orig + step
            with T.no_grad():
                up = float(loss_fn().data)
            flat[k] = orig - step
            with T.no_grad():
                down = float(loss_fn().data)
            flat[k] = orig
            numeric = (up - down) / (2 * step)
            idx = tuple(int(i) for i in np.unravel_index(k, t.shape))
            a = float(analytic.reshape(-1)[k])
            err = CoordinateError(name, idx, a, numeric, rel_error(a, numeric, floor))
            report.checked += 1
            if report.worst is None or err.rel_err > report.worst.rel_err:
                report.worst = err
            if err.rel_err >= tolerance:
                report.failures.append(err)
    return report


def _projected(forward: Callable[[], Tensor], shape: tuple, rng: np.random.Generator):
    # Scalar loss: fixed random projection of the output.
    weights = Tensor(rng.standard_normal(shape))
    return lambda: T.sum_all(T.hadamard(forward(), weights))


def _named(module: Module, x: Tensor | None = None) -> list:
    named = list(module.named_parameters())
    if x is not None:
        named.append(("input", x))
    return named


def _perturb(module: Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    # Move parameters off their structured init so no gradient path is trivially zero.
    for _, p in module.named_parameters():
        p.data += scale * rng.standard_normal(p.shape)


def _setup(scope: str, rng: np.random.Generator):
    """Return ``(loss_fn, named tensors)`` for one scope."""
    if scope == "conv1x1":
        m = Conv1x1(5, 3, rng)
        x = Tensor(rng.standard_normal((2, 5, 4, 3)), requires_grad=True)
        return _projected(lambda: m(x), (2, 3, 4, 3), rng), _named(m, x)
    if scope == "dwconv":
        m = DWConv3x3(3, rng)
        x = Tensor(rng.standard_normal((2, 3, 5, 4)), requires_grad=True)
        return _projected(lambda: m(x), (2, 3, 5, 4), rng), _named(m, x)
    if scope == "group_norm":
        m = GroupNorm(8)
        _perturb(m, rng)
        x = Tensor(rng.standard_normal((2, 8, 3, 3)), requires_grad=True)
        return _projected(lambda: m(x), (2, 8, 3, 3), rng), _named(m, x)
    if scope == "batch_norm":
        m = BatchNorm(4)
        _perturb(m, rng)
        m.state.running_mean = rng.standard_normal(4)
        m.state.running_var = rng.uniform(0.5, 2.0, 4)
        m.eval()
        x = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
        return _projected(lambda: m(x), (2, 4, 3, 3), rng), _named(m, x)
    if scope == "ssm":
        m = SsmParams(4, 3, rng)
        x = Tensor(rng.standard_normal((2, 4, 12)), requires_grad=True)
        return _projected(lambda: selective_scan(x, m), x.shape, rng), _named(m, x)
    if scope == "moe":
        m = MoEFusion(8, rng)
        _perturb(m, rng, 0.2)
        m.concat_bn.state.running_var = rng.uniform(0.5, 2.0, 8)
        m.eval()
        ys = [Tensor(rng.standard_normal((2, 8, 4, 4)), requires_grad=True) for _ in range(4)]
        named = _named(m) + [(f"input{i + 1}", y) for i, y in enumerate(ys)]
        return _projected(lambda: m(ys), ys[0].shape, rng), named
    if scope == "vss":
        m = PatchMoEVSSBlock(8, (4, 4, 2, 2), rng, state_dim=4)
        _perturb(m.fusion, rng, 0.2)
        m.eval()
        x = Tensor(rng.standard_normal((2, 8, 8, 8)), requires_grad=True)
        return _projected(lambda: m(x), x.shape, rng), _named(m, x)
    if scope == "net":
        cfg = NetworkConfig(stage_channels=(4, 8), patch_scheme="4422/1111", sdi_channels=4,
                            input_size=(16, 16), state_dim=4)
        m = PatchMoENet(cfg, seed=int(rng.integers(1 << 31)))
        for blocks in m.encoder.stages:
            for blk in blocks:
                _perturb(blk.fusion, rng, 0.2)
        m.eval()
        x = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
        mask = (rng.random((2, 1, 16, 16)) > 0.6).astype(np.float64)
        return (lambda: segmentation_loss(m(x), mask)), _named(m)
    raise T.ConfigurationError(f"unknown gradcheck scope {scope!r}; choose from {', '.join(SCOPES)}")


def gradcheck(scope: str, trials: int = 8, step: float = DEFAULT_STEP, tolerance: float | None = None,
              seed: int = 0, corrupt: bool = False) -> GradcheckReport:
    """Run the finite-difference check for one named scope (see ``SCOPES``)."""
    if scope not in TOLERANCES:
        raise T.ConfigurationError(f"unknown gradcheck scope {scope!r}; choose from {', '.join(SCOPES)}")
    tol = TOLERANCES[scope] if tolerance is None else tolerance
    with T.precision("f64"):
        rng = np.random.default_rng(seed)
        loss_fn, named = _setup(scope, rng)
        return check_gradients(loss_fn, named, scope, tol, step, trials, seed, corrupt)


def gradcheck_all(scopes=SCOPES, **kwargs) -> list[GradcheckReport]:
    return [gradcheck(s, **kwargs) for s in scopes]
