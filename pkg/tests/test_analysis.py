from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from analysis import (
    contact_accuracy,
    decoder_loss,
    decoder_nll,
    heading_error,
    mechanical_cot,
    optimal_sigma,
    positive_power,
    saliency,
    split_privileged,
    train_decoder_epoch,
)
from environment import HIST_DIM, OBS_DIM, PRIV_DIM
from networks import Decoder, GruStudent, TcnStudent
from utils.errors import ShapeError, UndefinedMetricError

DTYPE = torch.float64


def test_perfect_mean_with_unit_sigma_has_zero_nll():
    target = torch.randn(5, 59, dtype=DTYPE)
    assert float(decoder_nll(target, torch.zeros_like(target), target)) == 0.0


@pytest.mark.parametrize('residual', [0.3, -1.7, 4.0])
def test_optimal_sigma_equals_residual_magnitude(residual):
    assert optimal_sigma(residual) == pytest.approx(abs(residual), rel=1e-5)


def test_privileged_split_sizes():
    continuous, contacts = split_privileged(torch.zeros(3, PRIV_DIM, dtype=DTYPE))
    assert continuous.shape == (3, 59)
    assert contacts.shape == (3, 12)


def test_decoder_training_reduces_loss():
    g = torch.Generator().manual_seed(0)
    decoder = Decoder().to(DTYPE)
    o = torch.randn(64, OBS_DIM, generator=g, dtype=DTYPE)
    latents = torch.randn(64, 64, generator=g, dtype=DTYPE)
    privileged = torch.randn(64, PRIV_DIM, generator=g, dtype=DTYPE)
    privileged[:, 52:64] = (privileged[:, 52:64] > 0).to(DTYPE)
    optimizer = torch.optim.Adam(decoder.parameters(), lr=1e-3)
    rng = np.random.default_rng(0)
    before = float(decoder_loss(decoder, o, latents, privileged))
    for _ in range(30):
        train_decoder_epoch(decoder, optimizer, None, o, latents, privileged, 4, rng)
    after = float(decoder_loss(decoder, o, latents, privileged))
    assert math.isfinite(before) and after < before
    assert 0.0 <= contact_accuracy(decoder, o, latents, privileged) <= 1.0


def test_cost_of_transport():
    assert mechanical_cot(np.full(10, 60.0), np.full(10, 0.4), 500.0) == pytest.approx(0.3)
    power = positive_power(np.zeros((10, 12)), np.ones((10, 12)))
    assert mechanical_cot(power, np.full(10, 0.4), 500.0) == 0.0


def test_positive_power_ignores_braking():
    torques = np.array([[2.0, -3.0, 1.0]])
    velocities = np.array([[1.5, 1.0, -2.0]])
    assert positive_power(torques, velocities).tolist() == [3.0]


def test_cost_of_transport_without_motion():
    with pytest.raises(UndefinedMetricError):
        mechanical_cot(np.ones(5), np.zeros(5), 500.0)


def test_heading_error():
    assert heading_error([1.0, 0.0], [1 / math.sqrt(2), 1 / math.sqrt(2)]) == pytest.approx(45.0)
    assert heading_error([0.0, 1.0, 0.0], [0.0, -2.0, 0.5]) == pytest.approx(180.0)
    with pytest.raises(UndefinedMetricError):
        heading_error([1.0, 0.0], [0.0, 0.0])


def test_saliency_is_zero_outside_the_receptive_field():
    student = TcnStudent(20, 8).to(DTYPE)
    o = torch.randn(OBS_DIM, dtype=DTYPE)
    history = torch.randn(HIST_DIM, 30, dtype=DTYPE)
    values = saliency(student, o, history, leg=1)
    assert values.shape == (30,)
    assert np.all(values[:10] == 0.0)
    assert np.any(values[10:] > 0.0)


def test_saliency_matches_finite_differences():
    student = TcnStudent(20, 8).to(DTYPE)
    o = torch.randn(OBS_DIM, dtype=DTYPE)
    history = torch.randn(HIST_DIM, 20, dtype=DTYPE)
    leg, column, eps = 2, 17, 1e-6
    output = 4 + 3 * leg + 2
    estimate = 0.0
    with torch.no_grad():
        for channel in range(HIST_DIM):
            up, down = history.clone(), history.clone()
            up[channel, column] += eps
            down[channel, column] -= eps
            diff = student(o, up)[1][output] - student(o, down)[1][output]
            estimate += abs(float(diff)) / (2 * eps)
    assert saliency(student, o, history, leg)[column] == pytest.approx(estimate, rel=1e-5, abs=1e-9)


def test_saliency_scales_with_the_residual():
    student = GruStudent().to(DTYPE)
    o = torch.randn(OBS_DIM, dtype=DTYPE)
    history = torch.randn(HIST_DIM, 12, dtype=DTYPE)
    base = saliency(student, o, history, leg=0)
    assert np.all(base >= 0.0)
    assert np.allclose(saliency(student, o, history, leg=0, scale=0.5), 0.5 * base)


class _QuadraticStudent(torch.nn.Module):
    """Foot-z output of one leg is 0.5 * ||H||^2; every other output is zero."""

    def __init__(self, leg):
        super().__init__()
        self.selector = torch.zeros(16, dtype=DTYPE)
        self.selector[4 + 3 * leg + 2] = 1.0

    def forward(self, observation, history):
        return torch.zeros(64, dtype=DTYPE), 0.5 * (history ** 2).sum() * self.selector


@pytest.mark.parametrize('spike', [0, 7, 19])
def test_spiked_history_column_has_the_largest_saliency(spike):
    g = torch.Generator().manual_seed(spike)
    history = 0.01 * torch.randn(HIST_DIM, 20, generator=g, dtype=DTYPE)
    history[:, spike] += 1.0
    values = saliency(_QuadraticStudent(leg=3), torch.zeros(OBS_DIM, dtype=DTYPE), history, leg=3)
    assert int(np.argmax(values)) == spike
    assert np.allclose(values, history.abs().sum(dim=0).numpy(), rtol=0.0, atol=1e-15)
    assert np.all(saliency(_QuadraticStudent(leg=3), torch.zeros(OBS_DIM, dtype=DTYPE), history, leg=0) == 0.0)


def test_saliency_needs_a_single_history():
    student = TcnStudent(20, 8).to(DTYPE)
    with pytest.raises(ShapeError):
        saliency(student, torch.zeros(OBS_DIM, dtype=DTYPE), torch.zeros(1, HIST_DIM, 20, dtype=DTYPE), 0)
