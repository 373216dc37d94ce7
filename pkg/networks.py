"""
Policy, student, decoder and value networks (torch), Gaussian helpers and the
binary checkpoint container.
"""
import hashlib
import json
import logging
import math
import struct
from collections import namedtuple
from pathlib import Path

import numpy as np
import torch
from torch import nn

from environment import ACTION_DIM, HIST_DIM, OBS_DIM, PRIV_DIM
from utils.errors import CheckpointError, DomainError, ShapeError
from utils.validators import Validator

logger = logging.getLogger(__name__)

LATENT_DIM = 64
TRUNK_SIZES = (256, 128, 64)
ENCODER_SIZES = (72, LATENT_DIM)
GRU_HIDDEN = 68
DECODER_HIDDEN = 196
CONTACT_BITS = 12
DECODED_DIM = PRIV_DIM - CONTACT_BITS
KERNEL_SIZE = 5
# (kind, dilation): the conv stack of the temporal encoder
TCN_LAYOUT = (('dilated', 1), ('strided', 1), ('dilated', 2), ('strided', 1), ('dilated', 4), ('strided', 1))
# initial exploration std in action units: frequency offsets, then (x, y, z) residuals per leg
INITIAL_STD = np.concatenate([np.full(4, 0.2), np.tile([0.10 / 0.15, 0.10 / 0.15, 0.05 / 0.10], 4)])

CHECKPOINT_MAGIC = b'BLINDGT\x00'
CHECKPOINT_VERSION = 1

DiagGaussian = namedtuple('DiagGaussian', ['mean', 'std'])


def _init_linear_stack(layers, last_scale=0.01):
    linears = [m for m in layers if isinstance(m, nn.Linear)]
    for i, layer in enumerate(linears):
        gain = last_scale if i == len(linears) - 1 else 1.0
        nn.init.orthogonal_(layer.weight, gain=gain)
        nn.init.zeros_(layer.bias)


def mlp(sizes, activation=nn.Tanh, last_activation=False):
    """Linear layers with `activation` between them."""
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2 or last_activation:
            layers.append(activation())
    return nn.Sequential(*layers)


class Trunk(nn.Module):
    """(o, latent) -> 16 action means. Shared between teacher and students."""

    def __init__(self):
        super().__init__()
        self.net = mlp((OBS_DIM + LATENT_DIM,) + TRUNK_SIZES + (ACTION_DIM,))
        _init_linear_stack(self.net)

    def forward(self, observation, latent):
        return self.net(torch.cat([observation, latent], dim=-1))


class TeacherPolicy(nn.Module):
    """Privileged encoder over x plus the trunk; state-independent log-std."""

    kind = 'teacher'

    def __init__(self):
        super().__init__()
        self.encoder = mlp((PRIV_DIM,) + ENCODER_SIZES, last_activation=True)
        _init_linear_stack(self.encoder, last_scale=1.0)
        self.trunk = Trunk()
        self.log_std = nn.Parameter(torch.tensor(np.log(INITIAL_STD)))

    def architecture(self):
        return {'kind': self.kind}

    def forward(self, observation, privileged):
        latent = self.encoder(privileged)
        mean = self.trunk(observation, latent)
        return latent, mean, torch.exp(self.log_std).expand_as(mean)

    def distribution(self, observation, privileged, history=None):
        _, mean, std = self(observation, privileged)
        return DiagGaussian(mean, std)


def strided_geometry(length):
    """Kernel and left padding of a stride-2 layer so its last window ends at the newest column."""
    kernel = min(KERNEL_SIZE, length)
    padding = kernel - 1 + (length - 1) % 2
    return kernel, padding, (length + padding - kernel) // 2 + 1


class CausalConv(nn.Module):
    """Conv1d with left zero padding only."""

    def __init__(self, in_channels, out_channels, kernel, dilation=1, stride=1, padding=None):
        super().__init__()
        self.padding = dilation * (kernel - 1) if padding is None else padding
        self.conv = nn.Conv1d(in_channels, out_channels, kernel, stride=stride, dilation=dilation)

    def forward(self, x):
        return self.conv(nn.functional.pad(x, (self.padding, 0)))


class TcnEncoder(nn.Module):
    """Causal dilated/strided conv stack over (48, N) histories, tanh head to the latent."""

    def __init__(self, history_length, channels, input_dim=HIST_DIM):
        super().__init__()
        self.history_length = Validator.validate_history_length(history_length)
        self.channels = int(channels)
        layers, length, width = [], self.history_length, input_dim
        for kind, dilation in TCN_LAYOUT:
            if kind == 'dilated':
                layers.append(CausalConv(width, self.channels, KERNEL_SIZE, dilation=dilation))
            else:
                kernel, padding, length = strided_geometry(length)
                layers.append(CausalConv(width, self.channels, kernel, stride=2, padding=padding))
            layers.append(nn.ReLU())
            width = self.channels
        self.convs = nn.Sequential(*layers)
        self.output_length = length
        self.head = nn.Sequential(nn.Linear(self.channels * length, LATENT_DIM), nn.Tanh())

    def forward(self, history):
        features = self.convs(history[..., -self.history_length:])
        return self.head(features.flatten(start_dim=-2))


class TcnStudent(nn.Module):
    """Temporal-conv encoder plus the trunk; optional log-std for direct training."""

    kind = 'tcn'

    def __init__(self, history_length, channels, input_dim=HIST_DIM, stochastic=False):
        super().__init__()
        self.encoder = TcnEncoder(history_length, channels, input_dim)
        self.trunk = Trunk()
        self.stochastic = stochastic
        if stochastic:
            self.log_std = nn.Parameter(torch.tensor(np.log(INITIAL_STD)))

    @property
    def receptive_field(self):
        return self.encoder.history_length

    def architecture(self):
        return {'kind': self.kind, 'history_length': self.encoder.history_length,
                'channels': self.encoder.channels, 'input_dim': self.encoder.convs[0].conv.in_channels,
                'stochastic': self.stochastic}

    def forward(self, observation, history):
        latent = self.encoder(history)
        return latent, self.trunk(observation, latent)

    def distribution(self, observation, privileged, history):
        _, mean = self(observation, history)
        return DiagGaussian(mean, torch.exp(self.log_std).expand_as(mean))


class GruStudent(nn.Module):
    """GRU over the h stream, tanh projection to the latent, then the trunk."""

    kind = 'gru'

    def __init__(self, hidden_size=GRU_HIDDEN):
        super().__init__()
        self.gru = nn.GRU(HIST_DIM, hidden_size, batch_first=True)
        self.projection = nn.Sequential(nn.Linear(hidden_size, LATENT_DIM), nn.Tanh())
        self.trunk = Trunk()

    @property
    def receptive_field(self):
        return math.inf

    def architecture(self):
        return {'kind': self.kind, 'hidden_size': self.gru.hidden_size}

    def forward_sequence(self, observations, inputs, hidden=None):
        """
        Args:
            observations: (B, T, 121)
            inputs: (B, T, 48) h stream
            hidden: (1, B, H) or None for zeros

        Returns:
            tuple: latents (B, T, 64), actions (B, T, 16), final hidden
        """
        outputs, hidden = self.gru(inputs, hidden)
        latents = self.projection(outputs)
        return latents, self.trunk(observations, latents), hidden

    def forward(self, observation, history):
        """Run the GRU over every column of `history` from a zero state."""
        squeeze = observation.dim() == 1
        if squeeze:
            observation, history = observation[None], history[None]
        _, hidden = self.gru(history.transpose(-1, -2))
        latent = self.projection(hidden[-1])
        action = self.trunk(observation, latent)
        return (latent[0], action[0]) if squeeze else (latent, action)


class Decoder(nn.Module):
    """(o, latent) -> Gaussian over the continuous privileged dims plus contact logits."""

    kind = 'decoder'

    def __init__(self):
        super().__init__()
        self.hidden = nn.Sequential(nn.Linear(OBS_DIM + LATENT_DIM, DECODER_HIDDEN), nn.ReLU())
        self.out = nn.Linear(DECODER_HIDDEN, 2 * DECODED_DIM + CONTACT_BITS)

    def architecture(self):
        return {'kind': self.kind}

    def forward(self, observation, latent):
        y = self.out(self.hidden(torch.cat([observation, latent], dim=-1)))
        means, log_sigma, logits = torch.split(y, [DECODED_DIM, DECODED_DIM, CONTACT_BITS], dim=-1)
        return means, log_sigma, logits


class ValueBaseline(nn.Module):
    """tanh MLP over (o, x) -> scalar value."""

    kind = 'value'

    def __init__(self):
        super().__init__()
        self.net = mlp((OBS_DIM + PRIV_DIM,) + TRUNK_SIZES + (1,))
        _init_linear_stack(self.net, last_scale=1.0)

    def architecture(self):
        return {'kind': self.kind}

    def forward(self, observation, privileged):
        return self.net(torch.cat([observation, privileged], dim=-1)).squeeze(-1)


def _as_tensor(array, dtype):
    if isinstance(array, torch.Tensor):
        return array.to(dtype)
    return torch.as_tensor(np.asarray(array), dtype=dtype)


def _dtype_of(module):
    return next(module.parameters()).dtype


def teacher_forward(observation, privileged, policy):
    """
    Teacher outputs for one or a batch of inputs.

    Returns:
        tuple: (latent 64, action mean 16, action std 16)

    Raises:
        ShapeError: If o is not 121-dim or x not 71-dim
    """
    Validator.validate_dimension(observation, OBS_DIM, 'observation')
    Validator.validate_dimension(privileged, PRIV_DIM, 'privileged state')
    dtype = _dtype_of(policy)
    return policy(_as_tensor(observation, dtype), _as_tensor(privileged, dtype))


def student_forward(observation, history, student):
    """
    Student outputs.

    Args:
        observation: (..., 121)
        history: (..., 48, N) with N at least the student's history length
        student: TcnStudent or GruStudent

    Returns:
        tuple: (latent 64, action 16)
    """
    Validator.validate_dimension(observation, OBS_DIM, 'observation')
    dtype = _dtype_of(student)
    history = _as_tensor(history, dtype)
    if history.dim() < 2 or history.shape[-2] != HIST_DIM:
        raise ShapeError(f'History must be (48, N), got {tuple(history.shape)}')
    needed = getattr(student, 'receptive_field', 1)
    if math.isfinite(needed) and history.shape[-1] < needed:
        raise ShapeError(f'History has {history.shape[-1]} columns, student needs {needed}')
    return student(_as_tensor(observation, dtype), history)


def gaussian_logprob(action, mean, std):
    """
    Log-density of a diagonal Gaussian, summed over the last dimension.

    Raises:
        DomainError: If any std is not positive
    """
    if torch.any(std <= 0):
        raise DomainError('Standard deviation must be positive')
    var = std ** 2
    return (-((action - mean) ** 2) / (2.0 * var) - torch.log(std) - 0.5 * math.log(2.0 * math.pi)).sum(-1)


def kl_divergence(p, q):
    """KL(p || q) between diagonal Gaussians, summed over the last dimension."""
    if torch.any(p.std <= 0) or torch.any(q.std <= 0):
        raise DomainError('Standard deviation must be positive')
    ratio = (p.std ** 2 + (p.mean - q.mean) ** 2) / (2.0 * q.std ** 2)
    return (torch.log(q.std / p.std) + ratio - 0.5).sum(-1)


def gradient(loss, params):
    """Reverse-mode gradients of a scalar; zeros for parameters the loss does not depend on."""
    params = list(params)
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def flat_parameters(module):
    return torch.nn.utils.parameters_to_vector(module.parameters()).detach().clone()


def set_flat_parameters(module, flat):
    torch.nn.utils.vector_to_parameters(flat, module.parameters())


def copy_shared_layers(teacher, student):
    """
    Copy the teacher's trunk into the student; the student encoder is untouched.

    Raises:
        ShapeError: If the trunks differ in shape
    """
    source, target = teacher.trunk.state_dict(), student.trunk.state_dict()
    mismatched = [k for k in source if k not in target or source[k].shape != target[k].shape]
    if mismatched:
        raise ShapeError('Trunk architectures differ', payload={'blocks': mismatched})
    student.trunk.load_state_dict({k: v.to(target[k].dtype) for k, v in source.items()})
    return student


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def build_network(architecture, dtype=torch.float64):
    """Instantiate a network from its architecture dict."""
    kind = architecture.get('kind')
    if kind == 'teacher':
        net = TeacherPolicy()
    elif kind == 'tcn':
        net = TcnStudent(architecture['history_length'], architecture['channels'],
                         architecture.get('input_dim', HIST_DIM), architecture.get('stochastic', False))
    elif kind == 'gru':
        net = GruStudent(architecture.get('hidden_size', GRU_HIDDEN))
    elif kind == 'decoder':
        net = Decoder()
    elif kind == 'value':
        net = ValueBaseline()
    else:
        raise CheckpointError(f'Unknown network kind {kind!r}')
    return net.to(dtype)


def build_student(distill_config, dtype=torch.float64, stochastic=False):
    """Student network named by a DistillConfig section."""
    if distill_config.arch == 'gru':
        return GruStudent().to(dtype)
    n = distill_config.history_length
    return TcnStudent(n, distill_config.channels_for(n), stochastic=stochastic).to(dtype)


def parameter_hash(module):
    """sha256 over every parameter in float64 little-endian order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().astype('<f8').tobytes())
    return digest.hexdigest()


def _spec_hash(architecture):
    return hashlib.sha256(json.dumps(architecture, sort_keys=True).encode()).digest()


def sidecar_path(path):
    return Path(path).with_suffix('.json')


def save_checkpoint(path, networks, metadata=None):
    """
    Write named networks to a versioned binary file and a JSON sidecar.

    Args:
        path: Output file
        networks: Mapping name -> nn.Module with an `architecture()` method
        metadata: Extra JSON-serializable fields for the sidecar

    Returns:
        Path: the binary file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    architecture = {name: net.architecture() for name, net in networks.items()}
    blocks = []
    for name, net in networks.items():
        for key, tensor in net.state_dict().items():
            blocks.append((f'{name}.{key}', tensor.detach().cpu().numpy().astype('<f8')))

    with open(path, 'wb') as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack('<I', CHECKPOINT_VERSION))
        fh.write(_spec_hash(architecture))
        fh.write(struct.pack('<I', len(blocks)))
        for name, array in blocks:
            encoded = name.encode('utf-8')
            fh.write(struct.pack('<H', len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack('<B', array.ndim))
            fh.write(struct.pack(f'<{array.ndim}I', *array.shape))
            fh.write(np.ascontiguousarray(array).tobytes())

    sidecar = {'version': CHECKPOINT_VERSION, 'architecture': architecture, 'metadata': metadata or {},
               'parameters': {name: count_parameters(net) for name, net in networks.items()}}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    logger.info('Checkpoint saved', extra={'extra_fields': {'path': str(path), 'blocks': len(blocks)}})
    return path


def _read(fh, size):
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError('Checkpoint truncated')
    return data


def load_checkpoint(path, dtype=torch.float64):
    """
    Read a checkpoint written by `save_checkpoint`.

    Returns:
        tuple: (mapping name -> network, metadata dict)

    Raises:
        CheckpointError: On a missing file, bad magic, version or spec hash
    """
    path = Path(path)
    if not path.exists() or not sidecar_path(path).exists():
        raise CheckpointError(f'Checkpoint not found: {path}', payload={'flag': '--checkpoint'})
    sidecar = json.loads(sidecar_path(path).read_text())
    architecture = sidecar['architecture']

    with open(path, 'rb') as fh:
        if _read(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError('Not a checkpoint file', payload={'path': str(path)})
        (version,) = struct.unpack('<I', _read(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f'Unsupported checkpoint version {version}')
        if _read(fh, 32) != _spec_hash(architecture):
            raise CheckpointError('Architecture sidecar does not match the checkpoint')
        (count,) = struct.unpack('<I', _read(fh, 4))
        blocks = {}
        for _ in range(count):
            (length,) = struct.unpack('<H', _read(fh, 2))
            name = _read(fh, length).decode('utf-8')
            (ndim,) = struct.unpack('<B', _read(fh, 1))
            shape = struct.unpack(f'<{ndim}I', _read(fh, 4 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            blocks[name] = np.frombuffer(_read(fh, 8 * size), dtype='<f8').reshape(shape)

    networks = {}
    for name, arch in architecture.items():
        net = build_network(arch, dtype)
        prefix = f'{name}.'
        state = {k[len(prefix):]: torch.as_tensor(v.copy(), dtype=dtype) for k, v in blocks.items()
                 if k.startswith(prefix)}
        try:
            net.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f'Parameter blocks do not fit {name}', payload={'error': str(exc)}) from exc
        networks[name] = net
    return networks, sidecar.get('metadata', {})


class GaussianActor:
    """Samples actions from a policy's Gaussian with a numpy generator."""

    def __init__(self, policy, rng, deterministic=False):
        self.policy = policy
        self.rng = rng
        self.deterministic = deterministic
        self.dtype = _dtype_of(policy)

    def reset(self):
        pass

    @torch.no_grad()
    def act(self, observation, privileged, history):
        o = _as_tensor(observation, self.dtype)
        x = _as_tensor(privileged, self.dtype)
        H = _as_tensor(history, self.dtype)
        dist = self.policy.distribution(o, x, H)
        mean, std = dist.mean.numpy(), dist.std.numpy()
        action = mean if self.deterministic else mean + std * self.rng.standard_normal(mean.shape)
        log_prob = gaussian_logprob(torch.as_tensor(action, dtype=self.dtype), dist.mean, dist.std)
        return action, float(log_prob)


class StudentActor:
    """Deterministic student; the GRU variant carries its hidden state across steps."""

    def __init__(self, student):
        self.student = student
        self.dtype = _dtype_of(student)
        self.hidden = None

    def reset(self):
        self.hidden = None

    @torch.no_grad()
    def act(self, observation, privileged, history):
        o = _as_tensor(observation, self.dtype)
        H = _as_tensor(history, self.dtype)
        if isinstance(self.student, GruStudent):
            _, actions, self.hidden = self.student.forward_sequence(o[None, None], H[:, -1][None, None],
                                                                   self.hidden)
            return actions[0, 0].numpy(), 0.0
        _, action = self.student(o, H)
        return action.numpy(), 0.0
