"""Rigid-body dynamics of the pinned five-link biped.

Swing-phase Lagrangian dynamics, the plastic impact/relabeling reset,
the touchdown guard, configuration feasibility and energy audits.  All
functions are pure; the model object is immutable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LINK_ANGLE_MAP, RELABEL, RobotModel

A_MAP = LINK_ANGLE_MAP

#: Input map: four motor torques act on the relative joints q2..q5;
#: the stance-contact row is zero (one degree of underactuation).
B_INPUT = np.vstack([np.zeros((1, 4)), np.eye(4)])

GROUND_TOL = 1e-9


class GuardError(ValueError):
    """Reset map applied off the guard surface."""


class SingularImpactError(ValueError):
    """Impact equations singular at the given configuration."""


@dataclass(frozen=True)
class FullState:
    """Joint angles and velocities of the pinned robot."""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        qd = np.asarray(self.qdot, dtype=float)
        if q.shape != (5,) or qd.shape != (5,):
            raise ValueError("FullState needs 5 angles and 5 velocities")
        if not (np.isfinite(q).all() and np.isfinite(qd).all()):
            raise ValueError("FullState entries must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])

    @staticmethod
    def from_vector(x) -> "FullState":
        x = np.asarray(x, dtype=float)
        return FullState(x[:5], x[5:])


@dataclass(frozen=True)
class GuardReading:
    height: float
    velocity: float

    def on_guard(self, tol: float = 1e-8) -> bool:
        return abs(self.height) <= tol and self.velocity < 0.0


def _unit(phi):
    return np.stack([-np.sin(phi), np.cos(phi)])


def _dunit(phi):
    return np.stack([-np.cos(phi), -np.sin(phi)])


def link_angles(q):
    return A_MAP @ np.asarray(q, dtype=float)


def com_positions(model: RobotModel, q) -> np.ndarray:
    """COM positions of the five links, shape (5, 2), stance foot at origin."""
    u = _unit(link_angles(q))  # (2, 5)
    return model.com_map @ u.T


def com_jacobians(model: RobotModel, q) -> np.ndarray:
    """d(COM_i)/dq, shape (5 links, 2, 5)."""
    du = _dunit(link_angles(q))  # (2, 5)
    return np.einsum("ik,ck,kj->icj", model.com_map, du, A_MAP)


def _com_jacobian_derivs(model: RobotModel, q) -> np.ndarray:
    """d^2(COM_i)/dq dq, shape (5, 2, 5, 5); last index differentiates."""
    u = _unit(link_angles(q))
    return np.einsum("ik,ck,kj,kl->icjl", model.com_map, -u, A_MAP, A_MAP)


def joint_points(model: RobotModel, q) -> dict:
    """World positions of the chain joints (stance foot at origin)."""
    phi = link_angles(q)
    u = _unit(phi)
    l_t, l_th, l_sh = (model.lengths[n] for n in ("torso", "thigh", "shin"))
    st_knee = l_sh * u[:, 2]
    hip = st_knee + l_th * u[:, 1]
    return {
        "stance_foot": np.zeros(2),
        "stance_knee": st_knee,
        "hip": hip,
        "torso_top": hip + l_t * u[:, 0],
        "swing_knee": hip - l_th * u[:, 3],
        "swing_foot": hip - l_th * u[:, 3] - l_sh * u[:, 4],
    }


def swing_foot_map(model: RobotModel):
    """Coefficients c with swing-foot position = sum_k c[k] u(phi_k)."""
    l_th, l_sh = model.lengths["thigh"], model.lengths["shin"]
    return np.array([0.0, l_th, l_sh, -l_th, -l_sh])


def swing_foot_position(model: RobotModel, q) -> np.ndarray:
    return _unit(link_angles(q)) @ swing_foot_map(model)


def swing_foot_jacobian(model: RobotModel, q) -> np.ndarray:
    du = _dunit(link_angles(q))
    return np.einsum("k,ck,kj->cj", swing_foot_map(model), du, A_MAP)


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    J = com_jacobians(model, q)
    M = np.einsum("i,icj,ick->jk", model.link_masses, J, J)
    M += A_MAP.T @ (model.link_inertias[:, None] * A_MAP)
    return 0.5 * (M + M.T)


def mass_matrix_derivs(model: RobotModel, q) -> np.ndarray:
    """dM/dq, shape (5, 5, 5); last index is the differentiation index."""
    J = com_jacobians(model, q)
    dJ = _com_jacobian_derivs(model, q)
    half = np.einsum("i,icjl,ick->jkl", model.link_masses, dJ, J)
    return half + half.transpose(1, 0, 2)


def coriolis_matrix(model: RobotModel, q, qdot) -> np.ndarray:
    """Coriolis/centrifugal matrix from Christoffel symbols of M(q)."""
    dM = mass_matrix_derivs(model, q)
    qdot = np.asarray(qdot, dtype=float)
    # c[k, j, l] = 0.5 (dM[k,j,l] + dM[k,l,j] - dM[j,l,k])
    c = 0.5 * (dM + dM.transpose(0, 2, 1) - dM.transpose(2, 0, 1))
    return np.einsum("kjl,l->kj", c, qdot)


def gravity_vector(model: RobotModel, q) -> np.ndarray:
    J = com_jacobians(model, q)
    return model.gravity * np.einsum("i,ij->j", model.link_masses, J[:, 1, :])


def bias_and_gravity(model: RobotModel, q, qdot) -> np.ndarray:
    """C(q, qd) qd + G(q), the drift generalized forces."""
    return coriolis_matrix(model, q, qdot) @ np.asarray(qdot, dtype=float) + gravity_vector(
        model, q
    )


def swing_dynamics(model: RobotModel, x: FullState, u) -> np.ndarray:
    """xdot = f(x) + g(x) u for the pinned swing phase."""
    u = np.asarray(u, dtype=float)
    if u.shape != (4,):
        raise ValueError("expected 4 torques")
    if np.any(np.abs(u) > model.u_max * (1 + 1e-9)):
        raise ValueError(f"torque outside [-{model.u_max}, {model.u_max}]: {u}")
    M = mass_matrix(model, x.q)
    rhs = B_INPUT @ u - bias_and_gravity(model, x.q, x.qdot)
    qddot = np.linalg.solve(M, rhs)
    return np.concatenate([x.qdot, qddot])


def continuous_vector_fields(model: RobotModel, x: FullState):
    """(f(x), g(x)) with xdot = f + g u; g has shape (10, 4)."""
    M = mass_matrix(model, x.q)
    Minv_rhs = np.linalg.solve(M, np.column_stack([-bias_and_gravity(model, x.q, x.qdot), B_INPUT]))
    f = np.concatenate([x.qdot, Minv_rhs[:, 0]])
    g = np.vstack([np.zeros((5, 4)), Minv_rhs[:, 1:]])
    return f, g


def _extended_mass_matrix(model: RobotModel, q) -> np.ndarray:
    """Mass matrix of the unpinned robot, coords (q, base_x, base_y)."""
    J = com_jacobians(model, q)  # (5, 2, 5)
    Je = np.concatenate([J, np.tile(np.eye(2)[None], (5, 1, 1))], axis=2)  # (5, 2, 7)
    Me = np.einsum("i,icj,ick->jk", model.link_masses, Je, Je)
    Me[:5, :5] += A_MAP.T @ (model.link_inertias[:, None] * A_MAP)
    return 0.5 * (Me + Me.T)


def impact_velocity_map(model: RobotModel, q_minus) -> np.ndarray:
    """The 5x5 matrix D with qdot_plus = D qdot_minus (includes relabeling)."""
    q_minus = np.asarray(q_minus, dtype=float)
    Me = _extended_mass_matrix(model, q_minus)
    Jsw = np.hstack([swing_foot_jacobian(model, q_minus), np.eye(2)])  # (2, 7)
    kkt = np.block([[Me, -Jsw.T], [Jsw, np.zeros((2, 2))]])
    # qdot_e_plus = P qdot_e_minus with P the plastic-impact projection.
    rhs = np.vstack([Me[:, :5], np.zeros((2, 5))])  # qdot_e_minus = (qdot, 0, 0)
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        raise SingularImpactError(f"impact equations singular at q = {q_minus}") from None
    if not np.isfinite(sol).all():
        raise SingularImpactError(f"impact equations singular at q = {q_minus}")
    D_unrelabeled = sol[:5, :]
    return D_unrelabeled[RELABEL, :]


def impact_map(model: RobotModel, x_minus: FullState, guard_tol: float = 1e-8) -> FullState:
    """Plastic impact followed by stance/swing relabeling."""
    g = guard_evaluate(model, x_minus)
    if not g.on_guard(guard_tol):
        raise GuardError(
            f"impact_map off the guard: height {g.height:.3e}, velocity {g.velocity:.3e}"
        )
    q_plus = x_minus.q[RELABEL]
    qd_plus = impact_velocity_map(model, x_minus.q) @ x_minus.qdot
    return FullState(q_plus, qd_plus)


def guard_evaluate(model: RobotModel, x: FullState) -> GuardReading:
    pos = swing_foot_position(model, x.q)
    vel = swing_foot_jacobian(model, x.q) @ x.qdot
    return GuardReading(float(pos[1]), float(vel[1]))


def feasible(model: RobotModel, q, margin: float | None = None) -> bool:
    """Joint limits hold and only foot points touch the ground."""
    q = np.asarray(q, dtype=float)
    if not np.isfinite(q).all():
        return False
    if not model.within_joint_limits(q):
        return False
    m = model.clearance_margin if margin is None else margin
    pts = joint_points(model, q)
    for name in ("stance_knee", "hip", "torso_top", "swing_knee"):
        if pts[name][1] <= m - GROUND_TOL:
            return False
    # Feet may touch but not penetrate.
    if pts["swing_foot"][1] < -GROUND_TOL:
        return False
    return True


def kinetic_energy(model: RobotModel, x: FullState) -> float:
    return float(0.5 * x.qdot @ mass_matrix(model, x.q) @ x.qdot)


def potential_energy(model: RobotModel, q) -> float:
    y = com_positions(model, q)[:, 1]
    return float(model.gravity * (model.link_masses @ y))


def total_energy(model: RobotModel, x: FullState) -> float:
    """Kinetic plus gravitational potential energy (ground datum)."""
    return kinetic_energy(model, x) + potential_energy(model, x.q)
