"""
Floating-base rigid-body terms for the quadruped.

Generalized velocity u = (v, w, qdot): base-origin linear velocity and base
angular velocity, both in the world frame, then the 12 joint rates. The base
origin is the base center of mass. Every body contributes through its
Jacobians: M = sum(Jv' m Jv + Jw' I Jw) and the bias term collects the
velocity-product accelerations computed recursively down each leg.
"""
from dataclasses import dataclass

import numpy as np

from models import LEG_SIDES

NV = 18


def skew(v):
    """(..., 3) -> (..., 3, 3) cross-product matrices."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _rot_x(angles):
    c, s = np.cos(angles), np.sin(angles)
    out = np.zeros(angles.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1], out[..., 1, 2] = c, -s
    out[..., 2, 1], out[..., 2, 2] = s, c
    return out


def _rot_y(angles):
    c, s = np.cos(angles), np.sin(angles)
    out = np.zeros(angles.shape + (3, 3))
    out[..., 1, 1] = 1.0
    out[..., 0, 0], out[..., 0, 2] = c, s
    out[..., 2, 0], out[..., 2, 2] = -s, c
    return out


def cylinder_inertia(mass, length, radius, axis):
    """Solid cylinder inertia about its center, long axis along `axis` (0, 1 or 2)."""
    transverse = mass * (3.0 * radius ** 2 + length ** 2) / 12.0
    inertia = np.full(3, transverse)
    inertia[axis] = 0.5 * mass * radius ** 2
    return np.diag(inertia)


@dataclass
class LegFrames:
    """World-frame kinematics of all four legs. Index order: [leg, joint/link]."""
    origins: np.ndarray     # (4, 3, 3) joint origins
    axes: np.ndarray        # (4, 3, 3) joint axes
    rotations: np.ndarray   # (4, 3, 3, 3) link orientations
    coms: np.ndarray        # (4, 3, 3) link centers of mass
    feet: np.ndarray        # (4, 3)


def leg_frames(model, base_position, base_rotation, joint_positions):
    """Forward kinematics of every link in the world frame."""
    q = np.asarray(joint_positions, dtype=float).reshape(4, 3)
    R = base_rotation
    d, l1, l2 = model.abduction_offset, model.thigh_length, model.shank_length

    hips = base_position + model.hip_offsets @ R.T
    r1 = np.einsum('ij,ljk->lik', R, _rot_x(q[:, 0]))
    r2 = r1 @ _rot_y(q[:, 1])
    r3 = r2 @ _rot_y(q[:, 2])

    abd = np.column_stack([np.zeros(4), LEG_SIDES * d, np.zeros(4)])
    down1 = np.array([0.0, 0.0, -l1])
    down2 = np.array([0.0, 0.0, -l2])

    o1 = hips + np.einsum('lij,lj->li', r1, abd)
    o2 = o1 + r2 @ down1
    feet = o2 + r3 @ down2

    origins = np.stack([hips, o1, o2], axis=1)
    axes = np.stack([np.broadcast_to(R[:, 0], (4, 3)), r1[:, :, 1], r2[:, :, 1]], axis=1)
    coms = np.stack([hips + 0.5 * (o1 - hips), o1 + 0.5 * (o2 - o1), o2 + 0.5 * (feet - o2)], axis=1)
    rotations = np.stack([r1, r2, r3], axis=1)
    return LegFrames(origins=origins, axes=axes, rotations=rotations, coms=coms, feet=feet)


class RigidBodyModel:
    """Mass properties of the 13 bodies, prepared once per robot model."""

    def __init__(self, model):
        self.model = model
        m_abd, m_thigh, m_shank = model.link_masses
        r = max(model.link_radius, 1e-3)
        self.link_masses = np.tile([m_abd, m_thigh, m_shank], 4)
        self.link_inertias = np.tile(np.stack([
            cylinder_inertia(m_abd, model.abduction_offset, r, 1),
            cylinder_inertia(m_thigh, model.thigh_length, r, 2),
            cylinder_inertia(m_shank, model.shank_length, r, 2),
        ]), (4, 1, 1))
        self.link_legs = np.repeat(np.arange(4), 3)
        self.link_index = np.tile(np.arange(3), 4)
        self.gravity = np.array([0.0, 0.0, -model.gravity])

    def point_jacobians(self, frames, base_position, points, legs, links):
        """
        Linear-velocity Jacobians of points rigidly attached to bodies.

        Args:
            frames: LegFrames
            base_position: (3,)
            points: (P, 3) world positions
            legs: (P,) leg index, -1 for points on the base
            links: (P,) link index 0..2 (ignored for base points)

        Returns:
            np.ndarray: (P, 3, 18)
        """
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        J = np.zeros((n, 3, NV))
        J[:, :, 0:3] = np.eye(3)
        J[:, :, 3:6] = -skew(points - base_position)
        for j in range(3):
            idx = np.nonzero((legs >= 0) & (links >= j))[0]
            if idx.size == 0:
                continue
            leg = legs[idx]
            J[idx, :, 6 + 3 * leg + j] = np.cross(frames.axes[leg, j], points[idx] - frames.origins[leg, j])
        return J

    def angular_jacobians(self, frames):
        """(12, 3, 18) angular-velocity Jacobians of the links."""
        J = np.zeros((12, 3, NV))
        J[:, :, 3:6] = np.eye(3)
        for b in range(12):
            leg, link = self.link_legs[b], self.link_index[b]
            for j in range(link + 1):
                J[b, :, 6 + 3 * leg + j] = frames.axes[leg, j]
        return J

    def link_world_inertias(self, frames):
        rot = frames.rotations.reshape(12, 3, 3)
        return rot @ self.link_inertias @ np.transpose(rot, (0, 2, 1))

    def mass_matrix(self, frames, base_position, base_rotation, Jv=None, Jw=None, inertias=None):
        """18 x 18 joint-space inertia matrix."""
        if Jv is None:
            Jv = self.point_jacobians(frames, base_position, frames.coms.reshape(12, 3),
                                      self.link_legs, self.link_index)
        Jw = self.angular_jacobians(frames) if Jw is None else Jw
        Iw = self.link_world_inertias(frames) if inertias is None else inertias

        M = np.einsum('p,pai,paj->ij', self.link_masses, Jv, Jv)
        M += np.einsum('pai,pab,pbj->ij', Jw, Iw, Jw)
        M[0:3, 0:3] += self.model.base_mass * np.eye(3)
        M[3:6, 3:6] += base_rotation @ self.model.base_inertia @ base_rotation.T
        return 0.5 * (M + M.T)

    def dynamics_terms(self, frames, base_position, base_rotation, u):
        """Mass matrix and bias forces (Coriolis, centrifugal, gravity) at velocity u."""
        Jv = self.point_jacobians(frames, base_position, frames.coms.reshape(12, 3),
                                  self.link_legs, self.link_index)
        Jw = self.angular_jacobians(frames)
        Iw = self.link_world_inertias(frames)
        M = self.mass_matrix(frames, base_position, base_rotation, Jv, Jw, Iw)

        w = u[3:6]
        qd = u[6:].reshape(4, 3)
        omega_par = np.broadcast_to(w, (4, 3))
        alpha_par = np.zeros((4, 3))
        r0 = frames.origins[:, 0] - base_position
        acc_origin = np.cross(omega_par, np.cross(omega_par, r0))

        omegas = np.zeros((4, 3, 3))
        alphas = np.zeros((4, 3, 3))
        accs = np.zeros((4, 3, 3))
        for j in range(3):
            spin = frames.axes[:, j] * qd[:, j:j + 1]
            omega = omega_par + spin
            alpha = alpha_par + np.cross(omega_par, spin)
            rc = frames.coms[:, j] - frames.origins[:, j]
            accs[:, j] = acc_origin + np.cross(alpha, rc) + np.cross(omega, np.cross(omega, rc))
            omegas[:, j], alphas[:, j] = omega, alpha
            if j < 2:
                ro = frames.origins[:, j + 1] - frames.origins[:, j]
                acc_origin = acc_origin + np.cross(alpha, ro) + np.cross(omega, np.cross(omega, ro))
                omega_par, alpha_par = omega, alpha

        omegas = omegas.reshape(12, 3)
        alphas = alphas.reshape(12, 3)
        accs = accs.reshape(12, 3)
        forces = self.link_masses[:, None] * (accs - self.gravity)
        Iw_omega = np.einsum('pab,pb->pa', Iw, omegas)
        moments = np.einsum('pab,pb->pa', Iw, alphas) + np.cross(omegas, Iw_omega)

        h = np.einsum('pai,pa->i', Jv, forces) + np.einsum('pai,pa->i', Jw, moments)
        base_inertia = base_rotation @ self.model.base_inertia @ base_rotation.T
        h[0:3] -= self.model.base_mass * self.gravity
        h[3:6] += np.cross(w, base_inertia @ w)
        return M, h

    def energy(self, frames, base_position, base_rotation, u):
        """Kinetic plus gravitational potential energy."""
        M = self.mass_matrix(frames, base_position, base_rotation)
        kinetic = 0.5 * u @ M @ u
        heights = frames.coms[:, :, 2].reshape(12)
        potential = self.model.gravity * (self.model.base_mass * base_position[2] + self.link_masses @ heights)
        return float(kinetic + potential)
