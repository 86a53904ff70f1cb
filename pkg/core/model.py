# -*- coding: utf-8 -*-
"""
TT2VFin: Time2Vec encoding feeding a stack of transformer encoder blocks.

window [B x W] --(Time2Vec of relative positions, concatenated with the value)-->
[B x W x (k+2)] --affine--> [B x W x d_model] (+ positional encoding) -->
n_layers x encoder block --> pooling over time --> dropout --> affine head --> [B]

Ablation switches: use_time2vec, use_positional_encoding, use_causal_mask.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, fields

import numpy as np

from core import numerics as nx
from core.errors import DimensionError, UsageError
from core.numerics import NDArray
from modules.setup_logger import logger


logger = logging.getLogger(__name__)

# (use_time2vec, use_positional_encoding, use_causal_mask)
VARIANTS = {
    'base': (True, False, False),
    'p': (True, True, False),
    'm': (True, False, True),
    'pm': (True, True, True),
    'transformer-p': (False, True, False),
}

MASK_VALUE = -1e9
OMEGA_RANGE = (0.02, 0.5)


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults give 143,393 learnable scalars"""
    k: int = 15
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 144
    dropout_p: float = 0.1
    pooling: str = 'mean'
    window: int = 32
    use_time2vec: bool = True
    use_positional_encoding: bool = False
    use_causal_mask: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.k < 1:
            raise UsageError(f"Time2Vec needs k >= 1, got {self.k}")
        if self.n_layers < 1:
            raise UsageError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise UsageError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.use_positional_encoding and self.d_model % 2:
            raise UsageError(f"Positional encoding needs an even d_model, got {self.d_model}")
        if not 0 <= self.dropout_p < 1:
            raise UsageError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.pooling not in ('mean', 'max'):
            raise UsageError(f"pooling must be 'mean' or 'max', got {self.pooling!r}")
        if self.window < 1 or self.d_ff < 1:
            raise UsageError("window and d_ff must be positive")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> 'ModelConfig':
        try:
            t2v, pe, mask = VARIANTS[variant]
        except KeyError:
            raise UsageError(f"Unknown variant {variant!r}, choose from {list(VARIANTS)}")
        overrides.update(use_time2vec=t2v, use_positional_encoding=pe, use_causal_mask=mask)
        return cls(**overrides)

    @property
    def variant(self) -> str:
        flags = (self.use_time2vec, self.use_positional_encoding, self.use_causal_mask)
        for name, value in VARIANTS.items():
            if value == flags:
                return name
        return 'custom'

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def input_width(self) -> int:
        """Features per time step entering the input projection"""
        return (self.k + 1 if self.use_time2vec else 0) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"Unknown model config field(s): {sorted(unknown)}")
        return cls(**doc)


##################### PARAMETERS #########################

def _block_shapes(config: ModelConfig, i: int) -> dict:
    d, f = config.d_model, config.d_ff
    shapes = {}
    for proj in ('q', 'k', 'v', 'o'):
        shapes[f'block{i}.attn.{proj}.weight'] = (d, d)
        shapes[f'block{i}.attn.{proj}.bias'] = (d,)
    shapes[f'block{i}.ln1.gain'] = (d,)
    shapes[f'block{i}.ln1.bias'] = (d,)
    shapes[f'block{i}.ff1.weight'] = (d, f)
    shapes[f'block{i}.ff1.bias'] = (f,)
    shapes[f'block{i}.ff2.weight'] = (f, d)
    shapes[f'block{i}.ff2.bias'] = (d,)
    shapes[f'block{i}.ln2.gain'] = (d,)
    shapes[f'block{i}.ln2.bias'] = (d,)
    return shapes


def param_shapes(config: ModelConfig) -> dict:
    """Name -> shape of every learnable array, in a fixed order"""
    shapes = {}
    if config.use_time2vec:
        shapes['t2v.omega'] = (config.k + 1,)
        shapes['t2v.phi'] = (config.k + 1,)
    shapes['input.weight'] = (config.input_width, config.d_model)
    shapes['input.bias'] = (config.d_model,)
    for i in range(config.n_layers):
        shapes.update(_block_shapes(config, i))
    shapes['head.weight'] = (config.d_model, 1)
    shapes['head.bias'] = (1,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    """Exact number of learnable scalars"""
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


class ParameterSet(Mapping):
    """Named learnable arrays, in model order"""

    def __init__(self, arrays: dict) -> None:
        self._arrays = {}
        for name, value in arrays.items():
            value = value.value if isinstance(value, NDArray) else value
            self._arrays[name] = NDArray(value, requires_grad=True, name=name)

    def __getitem__(self, name: str) -> NDArray:
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def count(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def numpy(self) -> dict:
        return {name: a.value for name, a in self._arrays.items()}

    def replace(self, updates: dict) -> 'ParameterSet':
        """New set with some arrays swapped for new values"""
        merged = self.numpy()
        merged.update(updates)
        return ParameterSet(merged)

    def named_gradients(self, grads: dict) -> dict:
        """Map backward() output onto parameter names, zeros where unused"""
        return {name: grads.get(a, np.zeros(a.shape)) for name, a in self._arrays.items()}

    def all_finite(self) -> bool:
        return all(np.isfinite(a.value).all() for a in self._arrays.values())

    def check_against(self, config: ModelConfig) -> None:
        expected = param_shapes(config)
        if list(expected) != list(self._arrays):
            raise UsageError("Parameter names do not match the model configuration")
        for name, shape in expected.items():
            if self._arrays[name].shape != tuple(shape):
                raise UsageError(f"Parameter {name} has shape {self._arrays[name].shape}, config expects {shape}")


@dataclass
class Time2VecParameters:
    """omega[0], phi[0] form the linear term, 1..k the periodic ones"""
    omega: NDArray
    phi: NDArray

    @classmethod
    def from_set(cls, params: ParameterSet) -> 'Time2VecParameters':
        return cls(params['t2v.omega'], params['t2v.phi'])


def init_parameters(config: ModelConfig, seed: int) -> ParameterSet:
    """
    Seeded initialization

    Affine weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, layer norm
    gain 1 / bias 0, Time2Vec omega ~ U(OMEGA_RANGE), phi ~ U(0, 2 pi).
    """
    rng = nx.generator(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name == 't2v.omega':
            arrays[name] = rng.uniform(*OMEGA_RANGE, size=shape)
        elif name == 't2v.phi':
            arrays[name] = rng.uniform(0.0, 2 * np.pi, size=shape)
        elif name.endswith('.gain'):
            arrays[name] = np.ones(shape)
        elif name.endswith('.bias'):
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ParameterSet(arrays)


##################### LAYERS #########################

def time2vec_forward(tau, params: Time2VecParameters) -> NDArray:
    """
    t2v(tau)[0] = omega_0 tau + phi_0, t2v(tau)[i] = sin(omega_i tau + phi_i)

    :param tau: [W] time indices
    :returns: [W x (k+1)]
    """
    tau = np.asarray(tau, dtype=float).reshape(-1, 1)
    arg = nx.add(nx.multiply(tau, params.omega), params.phi)
    linear = np.zeros(params.omega.shape)
    linear[0] = 1.0
    return nx.add(nx.multiply(arg, linear), nx.multiply(nx.sin(arg), 1.0 - linear))


def positional_encoding(window: int, d_model: int) -> np.ndarray:
    """PE(t, 2j) = sin(t / 10000^(2j/d)), PE(t, 2j+1) = cos(t / 10000^(2j/d))"""
    if d_model % 2:
        raise UsageError(f"Positional encoding needs an even d_model, got {d_model}")
    t = np.arange(window, dtype=float).reshape(-1, 1)
    div = 10000.0 ** (np.arange(0, d_model, 2, dtype=float) / d_model)
    pe = np.empty((window, d_model))
    pe[:, 0::2] = np.sin(t / div)
    pe[:, 1::2] = np.cos(t / div)
    return pe


def causal_mask(window: int) -> np.ndarray:
    """Additive mask, position t only sees positions <= t"""
    return np.triu(np.full((window, window), MASK_VALUE), k=1)


def _split_heads(x: NDArray, n_heads: int) -> NDArray:
    lead = x.shape[:-2]
    w, d = x.shape[-2:]
    x = nx.reshape(x, lead + (w, n_heads, d // n_heads))
    n = len(lead)
    return nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: NDArray) -> NDArray:
    lead = x.shape[:-3]
    h, w, dh = x.shape[-3:]
    n = len(lead)
    x = nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return nx.reshape(x, lead + (w, h * dh))


def attention(q, k, v, n_heads: int = 1, mask=None) -> NDArray:
    """
    softmax(q k^T / sqrt(d_h) + mask) v per head, heads concatenated

    :param q, k, v: [..., W, d_model]
    :param mask: Optional additive [W x W] mask
    """
    q, k, v = nx.as_array(q), nx.as_array(k), nx.as_array(v)
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention needs equal q/k/v shapes, got {q.shape}, {k.shape}, {v.shape}")
    if q.ndim < 2 or q.shape[-1] % n_heads:
        raise DimensionError(f"attention width {q.shape[-1]} does not split into {n_heads} heads")
    d_head = q.shape[-1] // n_heads
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    scores = nx.scale(nx.matmul(qh, nx.transpose(kh)), 1.0 / math.sqrt(d_head))
    if mask is not None:
        mask = np.asarray(mask, dtype=float)
        if mask.shape != (q.shape[-2], q.shape[-2]):
            raise DimensionError(f"Mask shape {mask.shape} does not fit window {q.shape[-2]}")
        scores = nx.add(scores, mask)
    weights = nx.softmax(scores, axis=-1)
    return _merge_heads(nx.matmul(weights, vh))


def self_attention_forward(x: NDArray, params: ParameterSet, prefix: str, n_heads: int, mask=None) -> NDArray:
    """Q/K/V projections, attention, output projection"""
    q = nx.affine(x, params[f'{prefix}.q.weight'], params[f'{prefix}.q.bias'])
    k = nx.affine(x, params[f'{prefix}.k.weight'], params[f'{prefix}.k.bias'])
    v = nx.affine(x, params[f'{prefix}.v.weight'], params[f'{prefix}.v.bias'])
    out = attention(q, k, v, n_heads, mask)
    return nx.affine(out, params[f'{prefix}.o.weight'], params[f'{prefix}.o.bias'])


def encoder_block_forward(x: NDArray, params: ParameterSet, index: int, config: ModelConfig,
                          training: bool = False, rng: np.random.Generator = None) -> NDArray:
    """
    x -> LN(x + Dropout(MHA(x))) -> LN(. + Dropout(FF(.)))

    :param x: [..., W, d_model]
    :param index: Block number, selects the block{index}.* parameters
    """
    p = f'block{index}'
    mask = causal_mask(x.shape[-2]) if config.use_causal_mask else None
    a = self_attention_forward(x, params, f'{p}.attn', config.n_heads, mask)
    x = nx.layer_norm(nx.add(x, nx.dropout(a, config.dropout_p, rng, training)),
                      params[f'{p}.ln1.gain'], params[f'{p}.ln1.bias'], config.ln_eps)
    f = nx.relu(nx.affine(x, params[f'{p}.ff1.weight'], params[f'{p}.ff1.bias']))
    f = nx.affine(f, params[f'{p}.ff2.weight'], params[f'{p}.ff2.bias'])
    return nx.layer_norm(nx.add(x, nx.dropout(f, config.dropout_p, rng, training)),
                         params[f'{p}.ln2.gain'], params[f'{p}.ln2.bias'], config.ln_eps)


def _as_batch(windows, config: ModelConfig) -> np.ndarray:
    windows = np.asarray(windows.value if isinstance(windows, NDArray) else windows, dtype=float)
    if windows.ndim not in (1, 2) or windows.shape[-1] != config.window:
        raise UsageError(f"Expected windows of length {config.window}, got shape {windows.shape}")
    return windows.reshape(-1, config.window)


def encode(windows, config: ModelConfig, params: ParameterSet, training: bool = False,
           rng: np.random.Generator = None) -> NDArray:
    """Per-position encoder output [B x W x d_model]"""
    batch = _as_batch(windows, config)
    values = nx.NDArray(batch[..., None])
    if config.use_time2vec:
        t2v = time2vec_forward(np.arange(config.window), Time2VecParameters.from_set(params))
        t2v = nx.add(t2v, np.zeros(batch.shape + (1,)))
        features = nx.concatenate([t2v, values], axis=-1)
    else:
        features = values
    h = nx.affine(features, params['input.weight'], params['input.bias'])
    if config.use_positional_encoding:
        h = nx.add(h, positional_encoding(config.window, config.d_model))
    for i in range(config.n_layers):
        h = encoder_block_forward(h, params, i, config, training, rng)
    return h


def model_forward(windows, config: ModelConfig, params: ParameterSet, mode: str = 'eval',
                  rng: np.random.Generator = None) -> NDArray:
    """
    One step ahead prediction

    :param windows: [W] or [B x W] normalized aggregate values
    :param mode: 'train' applies dropout (needs rng), 'eval' is deterministic
    :returns: scalar NDArray for a single window, [B] otherwise
    """
    if mode not in ('train', 'eval'):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    params.check_against(config)
    training = mode == 'train'
    single = np.ndim(windows.value if isinstance(windows, NDArray) else windows) == 1
    h = encode(windows, config, params, training, rng)
    if config.pooling == 'mean':
        pooled = nx.mean(h, axis=-2)
    else:
        pooled = nx.reduce_max(h, axis=-2)
    pooled = nx.dropout(pooled, config.dropout_p, rng, training)
    out = nx.affine(pooled, params['head.weight'], params['head.bias'])
    return nx.reshape(out, () if single else (out.shape[0],))


class TT2VFin:
    """Model configuration bound to one parameter set"""

    def __init__(self, config: ModelConfig, params: ParameterSet = None, seed: int = 0) -> None:
        self._config = config
        self._params = params if params is not None else init_parameters(config, seed)
        self._params.check_against(config)
        logger.debug("TT2VFin variant %s with %d parameters", config.variant, self._params.count())

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def params(self) -> ParameterSet:
        """Current parameter set"""
        return self._params

    @params.setter
    def params(self, params: ParameterSet) -> None:
        params.check_against(self._config)
        self._params = params

    def forward(self, windows, mode: str = 'eval', rng: np.random.Generator = None) -> NDArray:
        return model_forward(windows, self._config, self._params, mode, rng)

    def predict(self, windows, batch_size: int = 256) -> np.ndarray:
        """Eval mode predictions, evaluated batch by batch in order"""
        batch = _as_batch(windows, self._config)
        out = [self.forward(batch[i:i + batch_size]).value for i in range(0, len(batch), batch_size)]
        return np.concatenate(out) if out else np.empty(0)
