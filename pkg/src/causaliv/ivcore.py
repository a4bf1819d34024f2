"""Scalar conditional-moment-restriction machinery with closed-form oracles.

A synthetic linear data-generating process with a hidden confounder, the
OLS/2SLS closed forms, and a minimax moment estimator trained as a zero-sum
game between a hypothesis function and a test function.  On the linear
function classes the game's equilibrium coincides with 2SLS, which is what
the oracle tests pin down before the same machinery is trusted on deep
features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .nn import Linear, Module, Sequential
from .seeding import derive_rng


class WeakInstrumentError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


MOMENT_DIVERGENCE_LIMIT = 1e6

DEFAULT_DGP = {
    "alpha": 1.0,  # instrument -> treatment
    "beta": 1.0,  # confounder -> treatment
    "theta": 1.0,  # treatment -> outcome (the causal target)
    "gamma": 1.0,  # confounder -> outcome
    "noise_t": 0.1,
    "noise_y": 0.1,
}


@dataclass
class ScalarIVDataset:
    z: np.ndarray
    t: np.ndarray
    y: np.ndarray
    u: np.ndarray  # retained for diagnostics only; estimators never see it
    dgp_params: dict

    @property
    def n(self) -> int:
        return self.z.shape[0]


@dataclass
class MomentEstimate:
    value: float
    per_sample_residuals: np.ndarray
    regularizer: float
    batch_size: int

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("moment value is not finite")
        if not np.all(np.isfinite(self.per_sample_residuals)):
            raise ValueError("per-sample residuals contain non-finite values")


def simulate_linear_dgp(params: dict | None = None, n: int = 100_000, seed: int = 0) -> ScalarIVDataset:
    """t = alpha*z + beta*u + nu_t;  y = theta*t + gamma*u + nu_y with
    u, z ~ N(0,1) independent."""
    p = dict(DEFAULT_DGP, **(params or {}))
    if n < 2:
        raise ValueError("n must be at least 2")
    if p["noise_t"] <= 0 or p["noise_y"] <= 0:
        raise ValueError("noise scales must be positive")
    rng = derive_rng(seed, "scalar-dgp", n)
    u = rng.standard_normal(n)
    z = rng.standard_normal(n)
    t = p["alpha"] * z + p["beta"] * u + p["noise_t"] * rng.standard_normal(n)
    y = p["theta"] * t + p["gamma"] * u + p["noise_y"] * rng.standard_normal(n)
    return ScalarIVDataset(z, t, y, u, dict(p, n=n, seed=seed))


def ols_fit(ds: ScalarIVDataset) -> float:
    """Cov(t, y) / Var(t); biased upward by gamma*beta under confounding."""
    var_t = np.var(ds.t)
    if var_t < 1e-30:
        raise ValueError("degenerate treatment variance")
    return float(np.cov(ds.t, ds.y)[0, 1] / np.cov(ds.t, ds.t)[0, 1])


def twosls_fit(ds: ScalarIVDataset) -> float:
    """Cov(z, y) / Cov(z, t), the instrumental-variable closed form."""
    cov_zt = np.cov(ds.z, ds.t)[0, 1]
    scale = np.std(ds.z) * np.std(ds.t)
    if abs(cov_zt) < 1e-12 * max(scale, 1e-30):
        raise WeakInstrumentError("Cov(z, t) is numerically zero: weak instrument")
    return float(np.cov(ds.z, ds.y)[0, 1] / cov_zt)


# -- scalar function classes ---------------------------------------------------


class ScalarLinear(Module):
    """w0 + w1 * x, initialized at zero."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.w0 = Tensor(np.zeros(1), requires_grad=True)
        self.w1 = Tensor(np.zeros(1), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return x * self.w1 + self.w0

    @property
    def slope(self) -> float:
        return float(self.w1.data[0])


class ScalarMLP(Module):
    """1 -> width -> 1 tanh network with small uniform initialization."""

    def __init__(self, seed: int = 0, width: int = 8):
        super().__init__()
        rng = derive_rng(seed, "scalar-mlp")
        self.fc1 = Linear(1, width, rng=rng)
        self.fc2 = Linear(width, 1, rng=rng)
        for p in self.parameters():
            p.data = rng.uniform(-0.1, 0.1, size=p.data.shape)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).tanh())


SCALAR_FUNCTION_CLASSES = {"linear": ScalarLinear, "mlp": ScalarMLP}


def make_scalar_function(name: str, seed: int = 0) -> Module:
    if name not in SCALAR_FUNCTION_CLASSES:
        raise ValueError(f"unknown function class {name!r}; registered: {sorted(SCALAR_FUNCTION_CLASSES)}")
    return SCALAR_FUNCTION_CLASSES[name](seed=seed)


@dataclass
class GmmFitConfig:
    steps: int = 2000
    lr: float = 0.1  # shared by both players
    lambda_g: float = 1.0  # E[g(z)^2] scale penalty
    seed: int = 0


def scalar_moment_objective(h: Module, g: Module, z: Tensor, t: Tensor, y: Tensor) -> Tensor:
    """E[(y - h(t)) * g(z)] as a differentiable scalar."""
    return ((y - h(t)) * g(z)).mean()


def moment_value(h: Module, g: Module, z: np.ndarray, t: np.ndarray, y: np.ndarray) -> MomentEstimate:
    if len(z) == 0:
        raise ValueError("empty batch")
    zt, tt, yt = (Tensor(np.asarray(a, dtype=np.float64).reshape(-1, 1)) for a in (z, t, y))
    residuals = (yt.data - h(tt).data).reshape(-1)
    gz = g(zt).data.reshape(-1)
    value = float(np.mean(residuals * gz))
    return MomentEstimate(value, residuals, float(np.mean(gz * gz)), len(residuals))


def gmm_minimax_fit(ds: ScalarIVDataset, h_class: str = "linear", g_class: str = "linear",
                    cfg: GmmFitConfig | None = None) -> tuple[Module, list[dict]]:
    """Alternating ascent/descent on E[(y - h(t)) g(z)] - lambda E[g(z)^2].

    One g-step then one h-step per iteration at a shared learning rate; the
    penalty keeps the test function bounded so the game has an interior
    equilibrium (matching 2SLS for the linear classes).
    """
    cfg = cfg or GmmFitConfig()
    h = make_scalar_function(h_class, seed=cfg.seed)
    g = make_scalar_function(g_class, seed=derive_rng(cfg.seed, "g-init").integers(2**31))
    z = Tensor(ds.z.reshape(-1, 1))
    t = Tensor(ds.t.reshape(-1, 1))
    y = Tensor(ds.y.reshape(-1, 1))
    trace = []
    for step in range(cfg.steps):
        # test-function ascent on the penalized objective
        gz = g(z)
        value = ((y - h(t)) * gz).mean()
        g_obj = value - cfg.lambda_g * (gz * gz).mean()
        for p in h.parameters():
            p.grad = None
        for p in g.parameters():
            p.grad = None
        g_obj.backward()
        for p in g.parameters():
            if p.grad is not None:
                p.data += cfg.lr * p.grad

        # hypothesis descent on the raw moment
        value = scalar_moment_objective(h, g, z, t, y)
        if not np.isfinite(value.data) or abs(float(value.data)) > MOMENT_DIVERGENCE_LIMIT:
            raise DivergenceError(f"moment value diverged at step {step}: {float(value.data)}")
        for p in h.parameters():
            p.grad = None
        for p in g.parameters():
            p.grad = None
        value.backward()
        for p in h.parameters():
            if p.grad is not None:
                p.data -= cfg.lr * p.grad
        if step % 50 == 0 or step == cfg.steps - 1:
            est = moment_value(h, g, ds.z, ds.t, ds.y)
            trace.append({"step": step, "value": est.value, "g_scale": est.regularizer})
    return h, trace
