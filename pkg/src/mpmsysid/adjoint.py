"""Reverse-mode gradients of a rollout with respect to the physics parameters.

The tape keeps one checkpoint per frame. The reverse pass re-runs each
frame forward to rebuild the per-substep states, then walks the substeps
backwards through the compiled reverse kernels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .constitutive import lame_jacobian
from .errors import AdjointError, DomainError
from .losses import LOSS_KINDS, LossValue, loss_and_grad
from .sim import (PARAM_NAMES, PARAM_BOX, ParticleSystem, PhysicsParams, SceneConfig, Stepper,
                  _eta_array, _raise, check_inside, frame_controls)


@dataclass
class ParamGradient:
    d_E: float
    d_nu: float
    d_rho: float
    d_sigma_y: float
    d_eta_t: float
    d_eta_m: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d_E, self.d_nu, self.d_rho, self.d_sigma_y, self.d_eta_t,
                         self.d_eta_m])

    @classmethod
    def from_array(cls, a) -> "ParamGradient":
        return cls(*[float(x) for x in a])

    def __add__(self, other):
        return ParamGradient.from_array(self.as_array() + other.as_array())


@dataclass
class RolloutTape:
    initial: ParticleSystem
    params: PhysicsParams
    scene: SceneConfig
    controls: list
    n_sub: int
    checkpoints: list = field(default_factory=list)   # (x, v, C, F) at each frame start
    final: ParticleSystem = None
    contacts: np.ndarray = None                       # particle contact bits per substep
    states: list = None                               # per-frame (sx, sv, sC, sF), optional

    def __len__(self):
        """Number of recorded substeps."""
        return len(self.controls) * self.n_sub

    @property
    def frames(self) -> int:
        return len(self.controls)


def _state_tuple(s: ParticleSystem):
    return (s.positions.copy(), s.velocities.copy(), s.affine.copy(), s.F_E.copy())


# substep states are kept in memory below this size, otherwise rebuilt
STATE_BUDGET_BYTES = 1 << 30


def record(initial: ParticleSystem, traj, params: PhysicsParams, scene: SceneConfig,
           effector=None, n_substeps: int | None = None, freeze_contacts=None,
           keep_contacts: bool = False, keep_states: bool | None = None):
    """Forward rollout that keeps what the reverse pass needs.

    freeze_contacts: a contact table from an earlier tape; particle contact
    sets are then replayed instead of detected (used to hold the contact
    structure fixed across a finite-difference stencil).
    keep_states: store every substep's pre-step state so the reverse pass
    skips one forward re-run per frame; by default only when the states fit
    in STATE_BUDGET_BYTES.
    """
    params.lame
    state = initial.copy()
    state.rho = params.rho
    controls = frame_controls(traj, effector, scene)
    n_sub = int(n_substeps or scene.substeps_for(params))
    tape = RolloutTape(initial.copy(), params, scene, controls, n_sub)
    if not controls:
        tape.final = state.copy()
        return state, tape
    check_inside(state, scene)
    stepper = Stepper(state, scene, len(controls[0]))
    N = len(state)
    mode = K.DETECT
    cbuf = None
    if freeze_contacts is not None:
        if freeze_contacts.shape != (len(controls) * n_sub, N):
            raise DomainError("frozen contact table does not match this rollout")
        mode, cbuf = K.REPLAY, freeze_contacts
    elif keep_contacts:
        mode, cbuf = K.RECORD, np.zeros((len(controls) * n_sub, N), dtype=np.uint8)
    if keep_states is None:
        keep_states = len(controls) * n_sub * N * 24 * 8 <= STATE_BUDGET_BYTES
    if keep_states:
        tape.states = []
    for j, cols0 in enumerate(controls):
        tape.checkpoints.append(_state_tuple(state))
        store = None
        if keep_states:
            store = (np.empty((n_sub, N, 3)), np.empty((n_sub, N, 3)),
                     np.empty((n_sub, N, 3, 3)), np.empty((n_sub, N, 3, 3)))
            tape.states.append(store)
        stepper.frame(state, cols0, params, n_sub, mode, cbuf, j * n_sub, store=store,
                      where=f" in frame {j}")
    tape.contacts = cbuf
    tape.final = state.copy()
    return state, tape


def replay(tape: RolloutTape) -> ParticleSystem:
    """Re-runs the taped rollout from its initial state."""
    state = tape.initial.copy()
    state.rho = tape.params.rho
    if not tape.controls:
        return state
    stepper = Stepper(state, tape.scene, len(tape.controls[0]))
    mode = K.DETECT if tape.contacts is None else K.REPLAY
    for j, cols0 in enumerate(tape.controls):
        stepper.frame(state, cols0, tape.params, tape.n_sub, mode, tape.contacts, j * tape.n_sub,
                      where=f" in frame {j}")
    return state


def backward_raw(tape: RolloutTape, gx_final: np.ndarray, gv_final=None) -> np.ndarray:
    """Adjoint of the final positions (and velocities) -> raw parameter adjoints.

    Returns the adjoints of (mu, lam, sigma_y, particle mass, eta_t, eta_m).
    """
    pgrad = np.zeros(6)
    if not tape.controls:
        return pgrad
    sc = tape.scene
    p = tape.params
    lame = p.lame
    N = len(tape.initial)
    n_sub = tape.n_sub
    dt = sc.frame_dt / n_sub
    ncol = len(tape.controls[0])
    stepper = Stepper(tape.initial, sc, ncol)
    buf = stepper.buf
    r = tuple(sc.resolution)
    ag = np.zeros(r + (3,))
    agm = np.zeros(r)
    if tape.states is None:
        sx = np.zeros((n_sub, N, 3))
        sv = np.zeros((n_sub, N, 3))
        sC = np.zeros((n_sub, N, 3, 3))
        sF = np.zeros((n_sub, N, 3, 3))
    x = np.zeros((N, 3))
    v = np.zeros((N, 3))
    C = np.zeros((N, 3, 3))
    F = np.zeros((N, 3, 3))
    gx = np.array(gx_final, dtype=np.float64).reshape(N, 3).copy()
    gv = np.zeros((N, 3)) if gv_final is None else np.array(gv_final, dtype=np.float64).copy()
    gC = np.zeros((N, 3, 3))
    gF = np.zeros((N, 3, 3))
    mode = K.DETECT if tape.contacts is None else K.REPLAY
    cbuf = buf.dummy_cbuf if tape.contacts is None else tape.contacts
    mp = p.rho * tape.initial.volume_per_particle
    vol = tape.initial.volume_per_particle
    etas = _eta_array(p)
    for j in range(tape.frames - 1, -1, -1):
        cols0 = tape.controls[j]
        if tape.states is not None:
            sx, sv, sC, sF = tape.states[j]
        else:
            x[:], v[:], C[:], F[:] = tape.checkpoints[j]
            st, idx, s = K.run_frame(x, v, C, F, buf.grid, buf.ws, cols0, buf.cols, stepper.lo,
                                     sc.dx, dt, n_sub, stepper.gravity, lame.mu, lame.lam,
                                     p.sigma_y, mp, vol, etas, sc.bound, sc.plasticity, mode,
                                     cbuf, j * n_sub, True, sx, sv, sC, sF)
            if st != K.OK:
                _raise(st, idx, f" in frame {j}, substep {s} (reverse pass)")
        st, s = K.backward_frame(sx, sv, sC, sF, x, v, C, F, buf.grid, buf.ws, cols0, buf.cols,
                                 stepper.lo, sc.dx, dt, n_sub, stepper.gravity, lame.mu,
                                 lame.lam, p.sigma_y, mp, vol, etas, sc.bound, sc.plasticity,
                                 mode, cbuf, j * n_sub, gx, gv, gC, gF, ag, agm, pgrad)
        if st != K.OK:
            raise AdjointError(j * n_sub + s)
    if not np.all(np.isfinite(pgrad)):
        raise AdjointError(0)
    return pgrad


def chain_to_params(pgrad: np.ndarray, params: PhysicsParams, volume_per_particle: float
                    ) -> ParamGradient:
    """(mu, lam, sigma_y, mass, eta_t, eta_m) adjoints -> the six physics parameters."""
    J = lame_jacobian(params.E, params.nu)
    dE, dnu = pgrad[0] * J[0] + pgrad[1] * J[1]
    return ParamGradient(float(dE), float(dnu), float(pgrad[3] * volume_per_particle),
                         float(pgrad[2]), float(pgrad[4]), float(pgrad[5]))


def backward(tape: RolloutTape, loss_kind: str, target, **loss_kw):
    """Loss of the taped final state against `target` and its parameter gradient."""
    loss, gx = loss_and_grad(tape.final.positions, target, loss_kind, **loss_kw)
    pgrad = backward_raw(tape, gx)
    return loss, chain_to_params(pgrad, tape.params, tape.initial.volume_per_particle)


# ------------------------------------------------------------------ finite differences


def fd_gradient(fun, params: PhysicsParams, rel_step: float = 1e-4, names=PARAM_NAMES):
    """Central differences of a scalar function of the parameters.

    Steps are relative to each value; a step that would leave the box is
    not clipped (the simulator accepts slightly out-of-box values).
    """
    base = params.as_array()
    out = {}
    for name in names:
        k = PARAM_NAMES.index(name)
        h = rel_step * abs(base[k])
        up = base.copy()
        dn = base.copy()
        up[k] += h
        dn[k] -= h
        out[name] = (fun(PhysicsParams.from_array(up)) - fun(PhysicsParams.from_array(dn))) / (2 * h)
    return out


# ------------------------------------------------------------------ landscape


def evaluate_loss(params: PhysicsParams, datapoint, loss_kind: str, scene: SceneConfig,
                  n_substeps: int | None = None) -> float:
    from .sim import rollout
    final = rollout(datapoint.initial_system(), datapoint.trajectory, params, scene,
                    datapoint.effector(), n_substeps=n_substeps)
    loss, _ = loss_and_grad(final.positions, datapoint.target_for(loss_kind), loss_kind,
                            need_grad=False)
    return loss.value


def landscape_sweep(pair, others: PhysicsParams, dataset, loss_kind: str, scene: SceneConfig,
                    intervals: int = 30, n_substeps: int | None = None,
                    on_error: str = "nan") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward-only loss over a grid of two parameters, mean-centred.

    Returns (centred matrix, values of the first parameter, values of the
    second). Rows follow the first parameter. Cells whose rollout fails are
    NaN and excluded from the mean.
    """
    a, b = pair
    if a not in PARAM_NAMES or b not in PARAM_NAMES or a == b:
        raise DomainError(f"bad parameter pair {pair!r}")
    if intervals < 2:
        raise DomainError("a sweep needs at least 2 intervals")
    if loss_kind not in LOSS_KINDS:
        raise DomainError(f"unknown loss kind {loss_kind!r}")
    va = np.linspace(*PARAM_BOX[a], intervals)
    vb = np.linspace(*PARAM_BOX[b], intervals)
    M = np.full((intervals, intervals), np.nan)
    base = others.as_array()
    ia, ib = PARAM_NAMES.index(a), PARAM_NAMES.index(b)
    for i, x in enumerate(va):
        for j, y in enumerate(vb):
            arr = base.copy()
            arr[ia] = x
            arr[ib] = y
            prm = PhysicsParams.from_array(arr)
            try:
                M[i, j] = sum(evaluate_loss(prm, dp, loss_kind, scene, n_substeps)
                              for dp in dataset) / len(dataset)
            except Exception:
                if on_error != "nan":
                    raise
    return center(M), va, vb


def center(M: np.ndarray) -> np.ndarray:
    ok = np.isfinite(M)
    out = M.copy()
    if ok.any():
        out[ok] -= M[ok].mean()
    return out
