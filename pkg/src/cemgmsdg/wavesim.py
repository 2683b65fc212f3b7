"""Leapfrog time stepping on the coarse multiscale space and on the fine DG space.

Coarse update (identity coarse mass, no linear solve)::

    U^{n+1} = 2 U^n - U^{n-1} + tau^2 (Phi^T F^n - K U^n),   K = Psi^T A Psi

Fine reference update::

    M U^{n+1} = M (2 U^n - U^{n-1}) + tau^2 (F^n - A U^n)
"""
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import load_vector

DEFAULT_TAU = 1e-4
DEFAULT_T = 0.2
DEFAULT_F0 = 20.0


class StabilityWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SourceSpec:
    """Source term. ``kind`` is ``"ricker"``, ``"none"`` or ``"callback"``.

    ``spatial_sign="positive"`` evaluates the spatial factor
    ``exp(+r^2/(4 h_src^2))`` literally; ``"negative"`` gives the decaying
    Gaussian.  ``callback(t, x, y)`` is used for ``kind="callback"``.
    """

    kind: str = "ricker"
    f0: float = DEFAULT_F0
    h_src: float = 1.0 / 256
    center: tuple = (0.5, 0.5)
    spatial_sign: str = "positive"
    callback: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("ricker", "none", "callback"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "ricker":
            if self.f0 <= 0:
                raise ValueError(f"f0 must be positive, got {self.f0}")
            if self.h_src <= 0:
                raise ValueError(f"h_src must be positive, got {self.h_src}")
            if self.spatial_sign not in ("positive", "negative"):
                raise ValueError(f"spatial_sign must be positive|negative, got {self.spatial_sign!r}")
        if self.kind == "callback" and self.callback is None:
            raise ValueError("callback source needs a callable")


def ricker_time(t, f0):
    """Temporal factor without the ``1/(4 h^2)`` scaling."""
    s = np.asarray(t, float) - 2.0 / f0
    return s * np.exp(-math.pi ** 2 * f0 ** 2 * s ** 2)


def ricker_space(x, y, h_src, center=(0.5, 0.5), spatial_sign="positive"):
    sign = 1.0 if spatial_sign == "positive" else -1.0
    r2 = (np.asarray(x, float) - center[0]) ** 2 + (np.asarray(y, float) - center[1]) ** 2
    return np.exp(sign * r2 / (4.0 * h_src ** 2))


def ricker(t, x, y, f0=DEFAULT_F0, h_src=1.0 / 256, center=(0.5, 0.5), spatial_sign="positive"):
    """Ricker-type source ``(t-2/f0)/(4h^2) exp(-pi^2 f0^2 (t-2/f0)^2) exp(+-r^2/(4h^2))``."""
    if h_src <= 0:
        raise ValueError(f"h_src must be positive, got {h_src}")
    return (ricker_time(t, f0) / (4.0 * h_src ** 2)
            * ricker_space(x, y, h_src, center, spatial_sign))


class SourceLoad:
    """Fine load vectors ``F^n = (f(t_n), N_i)``.

    The Ricker source is separable, so its spatial load is assembled once.
    """

    def __init__(self, mesh, spec, order=2):
        self.mesh, self.spec, self.order = mesh, spec, order
        self._space = None
        if spec.kind == "ricker":
            with np.errstate(over="ignore"):
                self._space = load_vector(
                    mesh, lambda x, y: ricker_space(x, y, spec.h_src, spec.center, spec.spatial_sign),
                    order) / (4.0 * spec.h_src ** 2)

    @property
    def is_zero(self):
        return self.spec.kind == "none"

    def __call__(self, t):
        if self.spec.kind == "none":
            return np.zeros(self.mesh.n_dofs)
        if self.spec.kind == "ricker":
            return float(ricker_time(t, self.spec.f0)) * self._space
        return load_vector(self.mesh, lambda x, y: self.spec.callback(t, x, y), self.order)


@dataclass
class WaveState:
    level: str  # "coarse" | "fine"
    U_prev: np.ndarray
    U_curr: np.ndarray
    n: int
    tau: float
    T: float

    @property
    def N_T(self):
        return int(round(self.T / self.tau))

    @property
    def t(self):
        return self.n * self.tau

    def reversed(self):
        """Swap the pair; leapfrog then runs backward in time."""
        return replace(self, U_prev=self.U_curr.copy(), U_curr=self.U_prev.copy())


@dataclass
class EnergyDiagnostic:
    """``E_half[k] = E^{k+1/2}``; ``norm_half`` is the non-negative part
    ``0.5|d|^2 + 0.5 a(s, s)``, used to detect instability growth."""

    E_half: list = field(default_factory=list)
    norm_half: list = field(default_factory=list)
    rho: float = float("nan")

    def max_relative_drift(self):
        E = np.asarray(self.E_half)
        return float(np.max(np.abs(E - E[0])) / abs(E[0]))

    def growth(self):
        nrm = np.asarray(self.norm_half)
        return float(np.max(nrm) / nrm[0])


def _energy(d_mass, d, Kd, s, Ks, tau):
    return 0.5 * d_mass - tau * tau / 8.0 * (d @ Kd) + 0.5 * (s @ Ks), 0.5 * d_mass + 0.5 * (s @ Ks)


def discrete_energy(v_n, v_np1, tau, K, M=None):
    """``E^{n+1/2}`` for the pair ``(v^n, v^{n+1})``.

    ``K`` is the coarse stiffness (coarse level, identity mass) or the fine
    IPDG matrix together with the fine mass ``M``.
    """
    d = (v_np1 - v_n) / tau
    s = 0.5 * (v_np1 + v_n)
    d_mass = d @ d if M is None else d @ (M @ d)
    return _energy(d_mass, d, K @ d, s, K @ s, tau)[0]


def coarse_load(basis, F):
    return basis.Phi.T @ F


def init_coarse(u0, v0, F0, basis, A, M, tau, init="b-projection", stiffness="coarse"):
    """Coarse coefficients ``(U^0, U^1)`` from fine initial data.

    ``u0``/``v0`` are fine vectors and ``F0`` the fine load vector at t=0.
    ``init="b-projection"`` uses ``Phi^T M (.)``; ``"l2-gram"`` solves the
    L2 projection onto span(Psi).  ``stiffness="fine"`` evaluates the
    correction ``a_DG(u0, psi)`` with the fine initial state instead of ``u_H^0``.
    """
    K = basis.coarse_stiffness
    Psi, Phi = basis.Psi, basis.Phi
    rhs0 = M @ u0
    rhs1 = M @ (u0 + tau * v0) + 0.5 * tau * tau * F0
    if init == "b-projection":
        U0 = Phi.T @ rhs0
        U1 = Phi.T @ rhs1
        if stiffness == "coarse":
            U1 = U1 - 0.5 * tau * tau * (K @ U0)
        elif stiffness == "fine":
            U1 = U1 - 0.5 * tau * tau * (Psi.T @ (A @ u0))
        else:
            raise ValueError(f"unknown stiffness option {stiffness!r}")
        return U0, U1
    if init == "l2-gram":
        G = (Psi.T @ (M @ Psi)).toarray()
        U0 = np.linalg.solve(G, Psi.T @ rhs0)
        corr = K @ U0 if stiffness == "coarse" else Psi.T @ (A @ u0)
        U1 = np.linalg.solve(G, Psi.T @ rhs1 - 0.5 * tau * tau * corr)
        return U0, U1
    raise ValueError(f"unknown init option {init!r}")


def init_fine(u0, v0, F0, A, mass_solver, tau):
    """``U^0 = u0``, ``M U^1 = M(u0 + tau v0) + tau^2/2 (F^0 - A u0)``."""
    U1 = u0 + tau * v0 + 0.5 * tau * tau * mass_solver.solve(F0 - A @ u0)
    return u0.copy(), U1


def step_coarse(state, basis, F=None):
    """One explicit coarse step; ``F`` is the fine load vector at ``t_n`` (or None)."""
    if state.level != "coarse":
        raise ValueError("step_coarse needs a coarse state")
    tau = state.tau
    r = -(basis.coarse_stiffness @ state.U_curr)
    if F is not None:
        r += coarse_load(basis, F)
    U_next = 2.0 * state.U_curr - state.U_prev + tau * tau * r
    return replace(state, U_prev=state.U_curr, U_curr=U_next, n=state.n + 1)


def step_fine(state, A, mass_solver, F=None):
    if state.level != "fine":
        raise ValueError("step_fine needs a fine state")
    tau = state.tau
    r = -(A @ state.U_curr)
    if F is not None:
        r += F
    U_next = 2.0 * state.U_curr - state.U_prev + tau * tau * mass_solver.solve(r)
    return replace(state, U_prev=state.U_curr, U_curr=U_next, n=state.n + 1)


def _leapfrog(state, apply_K, load, apply_Minv, n_steps, energy, mass_dot, callback, stride):
    tau = state.tau
    U_prev, U_curr = state.U_prev, state.U_curr
    KU_prev = apply_K(U_prev)
    KU_curr = apply_K(U_curr)
    diag = EnergyDiagnostic() if energy else None

    def record(v0, v1, Kv0, Kv1):
        d = (v1 - v0) / tau
        s = 0.5 * (v1 + v0)
        E, nrm = _energy(mass_dot(d), d, (Kv1 - Kv0) / tau, s, 0.5 * (Kv1 + Kv0), tau)
        diag.E_half.append(float(E))
        diag.norm_half.append(float(nrm))

    if energy:
        record(U_prev, U_curr, KU_prev, KU_curr)
    n = state.n
    for _ in range(n_steps):
        r = -KU_curr
        if load is not None:
            Fn = load(n * tau)
            if Fn is not None:
                r = r + Fn
        U_next = 2.0 * U_curr - U_prev + (tau * tau) * apply_Minv(r)
        KU_next = apply_K(U_next)
        if energy:
            record(U_curr, U_next, KU_curr, KU_next)
        U_prev, U_curr = U_curr, U_next
        KU_prev, KU_curr = KU_curr, KU_next
        n += 1
        if callback is not None and stride and n % stride == 0:
            callback(n, U_curr)
    return replace(state, U_prev=U_prev, U_curr=U_curr, n=n), diag


def run_coarse(basis, U0, U1, tau, n_steps, source=None, T=None, energy=False,
               tau_max=None, callback=None, stride=0):
    """Advance the coarse scheme ``n_steps`` from ``(U^0, U^1)`` at ``n = 1``.

    ``source`` maps ``t`` to a fine load vector (or is None).  Returns the
    final state and an :class:`EnergyDiagnostic` (``None`` unless ``energy``).
    """
    K = basis.coarse_stiffness
    if tau_max is not None and tau >= tau_max:
        warnings.warn(f"tau={tau:.4e} >= estimated tau_max={tau_max:.4e}: leapfrog is unstable",
                      StabilityWarning, stacklevel=2)
    PhiT = basis.Phi.T.tocsr()
    load = None
    if source is not None and not getattr(source, "is_zero", False):
        load = lambda t: PhiT @ source(t)  # noqa: E731
    state = WaveState("coarse", np.asarray(U0, float), np.asarray(U1, float), 1, tau,
                      T if T is not None else (n_steps + 1) * tau)
    state, diag = _leapfrog(state, lambda u: K @ u, load, lambda r: r, n_steps, energy,
                            lambda d: d @ d, callback, stride)
    if diag is not None and tau_max is not None:
        diag.rho = tau / tau_max
    return state, diag


def run_fine(A, mass_solver, M, U0, U1, tau, n_steps, source=None, T=None, energy=False,
             callback=None, stride=0):
    load = None
    if source is not None and not getattr(source, "is_zero", False):
        load = source
    state = WaveState("fine", np.asarray(U0, float), np.asarray(U1, float), 1, tau,
                      T if T is not None else (n_steps + 1) * tau)
    return _leapfrog(state, lambda u: A @ u, load, mass_solver.solve, n_steps, energy,
                     lambda d: d @ (M @ d), callback, stride)


@dataclass(frozen=True)
class CFLEstimate:
    tau_max: float
    lambda_max: float
    converged: bool
    method: str


def estimate_cfl(K, mass_solver=None, M=None, tol=1e-10, maxiter=None, seed=0):
    """Largest stable leapfrog step ``2/sqrt(lambda_max)``.

    ``lambda_max`` comes from ARPACK Lanczos on ``K`` (or on ``K x = l M x``
    with ``M`` given, using ``mass_solver`` for ``M^{-1}``).  Without a mass
    matrix, a failed Lanczos run falls back to the Gershgorin bound.
    """
    n = K.shape[0]
    if n <= 2:
        dense = K.toarray() if sp.issparse(K) else np.asarray(K)
        Md = None if M is None else (M.toarray() if sp.issparse(M) else np.asarray(M))
        lam = float(sla.eigh(dense, Md, eigvals_only=True)[-1])
        return CFLEstimate(2.0 / math.sqrt(lam), lam, True, "dense")
    v0 = np.random.default_rng(seed).standard_normal(n) + 1.0
    kwargs = dict(k=1, which="LA", tol=tol, v0=v0, maxiter=maxiter, return_eigenvectors=False)
    try:
        if M is not None:
            Minv = None
            if mass_solver is not None:
                Minv = spla.LinearOperator((n, n), matvec=mass_solver.solve, dtype=float)
            lam = spla.eigsh(K, M=M, Minv=Minv, **kwargs)[0]
        else:
            lam = spla.eigsh(K, **kwargs)[0]
        lam = float(lam)
        return CFLEstimate(2.0 / math.sqrt(lam), lam, True, "lanczos")
    except spla.ArpackNoConvergence:
        if M is not None:
            raise
        Kc = sp.csr_matrix(K)
        bound = float(np.max(np.asarray(abs(Kc).sum(axis=1)).ravel()))
        warnings.warn("Lanczos did not converge; using the Gershgorin bound",
                      RuntimeWarning, stacklevel=2)
        return CFLEstimate(2.0 / math.sqrt(bound), bound, False, "gershgorin")


def downscale(basis, U):
    """Fine representation ``Psi U`` of coarse coefficients."""
    return basis.Psi @ np.asarray(U, float)
