"""
Post-hoc analysis: privileged-state decoder loss, input saliency, mechanical
cost of transport and heading error.
"""
import logging
import math

import numpy as np
import torch
from scipy.optimize import minimize_scalar

from environment import PRIV_CONTACTS, PRIV_CONTINUOUS
from utils.errors import ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)


def split_privileged(privileged):
    """Continuous targets (59) and contact bits (12) of privileged states."""
    return privileged[..., PRIV_CONTINUOUS], privileged[..., PRIV_CONTACTS]


def decoder_nll(means, log_sigma, target):
    """Gaussian negative log-likelihood without the constant: sum (m - x)^2 / (2 sigma^2) + log sigma."""
    sigma_sq = torch.exp(2.0 * log_sigma)
    return (((means - target) ** 2) / (2.0 * sigma_sq) + log_sigma).sum(-1).mean()


def decoder_loss(decoder, observations, latents, privileged):
    """NLL on continuous dims plus binary cross-entropy on contact bits."""
    means, log_sigma, logits = decoder(observations, latents)
    continuous, contacts = split_privileged(privileged)
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, contacts, reduction='none').sum(-1).mean()
    return decoder_nll(means, log_sigma, continuous) + bce


def optimal_sigma(residual):
    """Numerical minimizer over sigma of r^2 / (2 sigma^2) + log sigma; analytically |r|."""
    r2 = float(residual) ** 2
    result = minimize_scalar(lambda log_s: r2 / (2.0 * math.exp(2.0 * log_s)) + log_s,
                             bounds=(-20.0, 20.0), method='bounded', options={'xatol': 1e-12})
    return math.exp(result.x)


def train_decoder_epoch(decoder, optimizer, scheduler, observations, latents, privileged, minibatches, rng):
    """One pass of minibatched Adam; the policy only supplies fixed latents."""
    n = observations.shape[0]
    losses = []
    for idx in np.array_split(rng.permutation(n), minibatches):
        if idx.size == 0:
            continue
        t = torch.as_tensor(idx)
        loss = decoder_loss(decoder, observations[t], latents[t], privileged[t])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        losses.append(float(loss))
    return float(np.mean(losses)) if losses else 0.0


@torch.no_grad()
def decode(decoder, observations, latents):
    """Decoded continuous means, standard deviations and contact probabilities."""
    means, log_sigma, logits = decoder(observations, latents)
    return means, torch.exp(log_sigma), torch.sigmoid(logits)


def contact_accuracy(decoder, observations, latents, privileged):
    _, _, probabilities = decode(decoder, observations, latents)
    _, contacts = split_privileged(privileged)
    return float(((probabilities > 0.5).to(contacts.dtype) == contacts).to(torch.float64).mean())


def saliency(student, observation, history, leg, scale=1.0):
    """
    Sum over channels of |d foot-target z / d H| for every history column.

    Args:
        student: Network returning (latent, action) from (o, H)
        observation: (121,) tensor
        history: (48, N) tensor
        leg: Leg index 0..3
        scale: Residual scale of the z output (m per unit action)

    Returns:
        np.ndarray: (N,) non-negative saliency per column
    """
    if history.dim() != 2:
        raise ShapeError('Saliency expects a single (48, N) history')
    H = history.detach().clone().requires_grad_(True)
    _, action = student(observation.detach(), H)
    output = action[4 + 3 * int(leg) + 2] * scale
    (grad,) = torch.autograd.grad(output, H, allow_unused=True)
    if grad is None:
        return np.zeros(H.shape[-1])
    return grad.abs().sum(dim=0).numpy()


def positive_power(torques, joint_velocities):
    """Sum over actuators of max(tau * qdot, 0) for each sample."""
    return np.maximum(np.asarray(torques) * np.asarray(joint_velocities), 0.0).sum(axis=-1)


def mechanical_cot(power, speed, weight, dt=None):
    """
    Mechanical cost of transport: integral of positive power over weight times distance.

    Args:
        power: Positive mechanical power per sample (W)
        speed: Travel speed per sample (m/s)
        weight: m g (N)
        dt: Sample durations, uniform when omitted

    Raises:
        UndefinedMetricError: If the mean speed is not positive
    """
    power = np.asarray(power, dtype=float)
    speed = np.asarray(speed, dtype=float)
    dt = np.ones_like(power) if dt is None else np.broadcast_to(np.asarray(dt, dtype=float), power.shape)
    distance = float(np.sum(speed * dt))
    if not distance > 0.0:
        raise UndefinedMetricError('Cost of transport needs a positive speed', payload={'distance': distance})
    return float(np.sum(power * dt) / (weight * distance))


def trajectory_cot(log, weight):
    """Cost of transport of a TrajectoryLog, using horizontal base speed."""
    arrays = log.arrays()
    speed = np.linalg.norm(arrays['base_linear_velocity'][:, :2], axis=1)
    return mechanical_cot(arrays['positive_power'], speed, weight)


def heading_error(command, velocity):
    """
    Angle in degrees between a commanded heading and a horizontal velocity.

    Raises:
        UndefinedMetricError: If either vector is zero
    """
    c = np.asarray(command, dtype=float)[:2]
    v = np.asarray(velocity, dtype=float)[:2]
    nc, nv = np.linalg.norm(c), np.linalg.norm(v)
    if nc == 0.0 or nv == 0.0:
        raise UndefinedMetricError('Heading error needs nonzero command and velocity')
    cosine = float(np.clip(c @ v / (nc * nv), -1.0, 1.0))
    return math.degrees(math.acos(cosine))
