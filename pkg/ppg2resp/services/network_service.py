"""Noise predictor eps_theta(y_t, t, x_ppg) with explicit forward and backward passes.

Arrays are channels-first: a feature map is (B, C, L) (a single map may be
passed as (C, L)). The network is

    f_ppg = E_fine(x) + lambda_ppg * P(E_coarse(x))       P: bias-free 1x1 projection
    F     = concat(f_ppg, E_fine_y(y_t)) + W_t emb(t) + b_t
    H     = [forward tanh RNN ; backward tanh RNN](F)
    out   = H w_head + b_head
"""
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from ppg2resp.core.errors import ShapeError
from ppg2resp.core.logging import get_logger
from ppg2resp.models.schemas import ModelConfig
from ppg2resp.services.diffusion_service import timestep_embedding

logger = get_logger(__name__)

FeatureMap = np.ndarray


class ConvBranch(NamedTuple):
    weight: np.ndarray  # (out_ch, in_ch, k)
    bias: np.ndarray    # (out_ch,)
    dilation: int

    @property
    def kernel_size(self) -> int:
        return int(self.weight.shape[2])

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1


def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Declared parameter order; checkpoints store arrays in exactly this order"""
    c = config.branch_channels
    d = config.feature_dim
    h = config.hidden_size
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for prefix, kernels in (("fine_ppg", config.fine_kernels), ("coarse_ppg", config.coarse_kernels)):
        for i, k in enumerate(kernels):
            shapes[f"{prefix}.{i}.weight"] = (c, 1, k)
            shapes[f"{prefix}.{i}.bias"] = (c,)
    shapes["coarse_proj.weight"] = (config.fine_channels, config.coarse_channels)
    for i, k in enumerate(config.fine_kernels):
        shapes[f"fine_y.{i}.weight"] = (c, 1, k)
        shapes[f"fine_y.{i}.bias"] = (c,)
    shapes["time.weight"] = (d, config.time_embed_dim)
    shapes["time.bias"] = (d,)
    for direction in ("fd", "bd"):
        shapes[f"rnn.W_dh_{direction}"] = (d, h)
        shapes[f"rnn.W_hh_{direction}"] = (h, h)
        shapes[f"rnn.b_h_{direction}"] = (h,)
    shapes["head.weight"] = (2 * h,)
    shapes["head.bias"] = (1,)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if name.endswith(".weight") and len(shape) == 3:
        return shape[1] * shape[2]
    if name.startswith("rnn.W_"):
        return shape[0]
    if len(shape) == 2:
        return shape[1]
    return shape[0]


class ModelParams:
    """Every learnable array of the noise predictor, keyed by name in declared order"""

    def __init__(self, config: ModelConfig, arrays: "OrderedDict[str, np.ndarray]"):
        self.config = config
        expected = param_shapes(config)
        if list(arrays.keys()) != list(expected.keys()):
            raise ShapeError("parameter names do not match the model configuration")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arrays[name].shape}")
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, np.zeros_like(v)) for k, v in self.arrays.items()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def round_to_float32(self) -> None:
        """Round in place to the precision checkpoints store"""
        for v in self.arrays.values():
            v[...] = v.astype(np.float32).astype(np.float64)

    def branches(self, prefix: str) -> List[ConvBranch]:
        kernels = self.config.coarse_kernels if prefix == "coarse_ppg" else self.config.fine_kernels
        dilation = self.config.coarse_dilation if prefix == "coarse_ppg" else 1
        return [
            ConvBranch(self.arrays[f"{prefix}.{i}.weight"], self.arrays[f"{prefix}.{i}.bias"], dilation)
            for i in range(len(kernels))
        ]


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero"""
    rng = np.random.default_rng(seed)
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith("bias") or name.startswith("rnn.b_h_"):
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, arrays)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"feature map must be (C, L) or (B, C, L), got shape {x.shape}")
    return x, False


def _pad(x: np.ndarray, branch: ConvBranch) -> np.ndarray:
    p = branch.dilation * (branch.kernel_size - 1) // 2
    return np.pad(x, ((0, 0), (0, 0), (p, p)))


def conv1d(x: FeatureMap, branch: ConvBranch) -> FeatureMap:
    """Same-padded dilated cross-correlation with bias"""
    if branch.kernel_size % 2 == 0:
        raise ShapeError("kernel size must be odd")
    if branch.dilation < 1:
        raise ShapeError("dilation must be >= 1")
    xb, single = _as_batch(x)
    if xb.shape[1] != branch.weight.shape[1]:
        raise ShapeError(f"conv1d expects {branch.weight.shape[1]} input channels, got {xb.shape[1]}")
    L = xb.shape[2]
    xp = _pad(xb, branch)
    out = np.zeros((xb.shape[0], branch.weight.shape[0], L))
    for j in range(branch.kernel_size):
        s = j * branch.dilation
        out += np.einsum("oi,bil->bol", branch.weight[:, :, j], xp[:, :, s:s + L])
    out += branch.bias[None, :, None]
    return out[0] if single else out


def conv1d_backward(x: np.ndarray, grad_out: np.ndarray, branch: ConvBranch) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of a conv1d with respect to its weight and bias"""
    xb, _ = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    L = xb.shape[2]
    xp = _pad(xb, branch)
    d_weight = np.zeros_like(branch.weight)
    for j in range(branch.kernel_size):
        s = j * branch.dilation
        d_weight[:, :, j] = np.einsum("bol,bil->oi", gb, xp[:, :, s:s + L])
    return d_weight, gb.sum(axis=(0, 2))


def _encode(x: FeatureMap, branches: List[ConvBranch]) -> FeatureMap:
    xb, single = _as_batch(x)
    outputs = [conv1d(xb, b) for b in branches]
    lengths = {o.shape[2] for o in outputs}
    assert lengths == {xb.shape[2]}, "same padding must preserve length"
    out = np.concatenate(outputs, axis=1)
    return out[0] if single else out


def fine_encoder(x: FeatureMap, branches: List[ConvBranch]) -> FeatureMap:
    """Channel-wise concatenation of undilated multi-kernel branches"""
    if any(b.dilation != 1 for b in branches):
        raise ShapeError("fine encoder branches must have dilation 1")
    return _encode(x, branches)


def coarse_encoder(x: FeatureMap, branches: List[ConvBranch]) -> FeatureMap:
    """As fine_encoder, with dilated branches"""
    if any(b.dilation <= 1 for b in branches):
        raise ShapeError("coarse encoder branches must have dilation > 1")
    return _encode(x, branches)


def _encoder_backward(x: np.ndarray, grad_out: np.ndarray, branches: List[ConvBranch], prefix: str,
                      grads: Dict[str, np.ndarray]) -> None:
    c0 = 0
    for i, branch in enumerate(branches):
        c1 = c0 + branch.weight.shape[0]
        dw, db = conv1d_backward(x, grad_out[:, c0:c1], branch)
        grads[f"{prefix}.{i}.weight"] += dw
        grads[f"{prefix}.{i}.bias"] += db
        c0 = c1


def fuse_ppg(x_ppg: np.ndarray, params: ModelParams) -> FeatureMap:
    """f_ppg = E_fine(x) + lambda_ppg * projected E_coarse(x)"""
    x = np.asarray(x_ppg, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, None, :] if single else x[:, None, :]
    fine = fine_encoder(xb, params.branches("fine_ppg"))
    coarse = coarse_encoder(xb, params.branches("coarse_ppg"))
    projected = _project(coarse, params)
    if projected.shape != fine.shape:
        raise ShapeError(f"fine/coarse channel mismatch {fine.shape} vs {projected.shape}")
    out = fine + params.config.lambda_ppg * projected
    return out[0] if single else out


def _project(coarse: np.ndarray, params: ModelParams) -> np.ndarray:
    # bias-free, so a zero coarse output adds nothing for any lambda_ppg
    return np.einsum("fc,bcl->bfl", params["coarse_proj.weight"], coarse)


# ---------------------------------------------------------------------------
# bidirectional RNN
# ---------------------------------------------------------------------------

def _rnn_direction(F_seq: np.ndarray, W_dh: np.ndarray, W_hh: np.ndarray, b: np.ndarray,
                   reverse: bool) -> np.ndarray:
    B, L, _ = F_seq.shape
    pre = F_seq @ W_dh + b
    states = np.zeros((B, L, W_hh.shape[0]))
    h = np.zeros((B, W_hh.shape[0]))
    order = range(L - 1, -1, -1) if reverse else range(L)
    for i in order:
        h = np.tanh(pre[:, i] + h @ W_hh)
        states[:, i] = h
    return states


def _birnn_states(F: np.ndarray, params: ModelParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = params["rnn.W_dh_fd"].shape[0]
    if F.shape[1] != d:
        raise ShapeError(f"birnn expects {d} feature channels, got {F.shape[1]}")
    F_seq = F.transpose(0, 2, 1)
    h_fd = _rnn_direction(F_seq, params["rnn.W_dh_fd"], params["rnn.W_hh_fd"], params["rnn.b_h_fd"], False)
    h_bd = _rnn_direction(F_seq, params["rnn.W_dh_bd"], params["rnn.W_hh_bd"], params["rnn.b_h_bd"], True)
    return F_seq, h_fd, h_bd


def birnn(F: FeatureMap, params: ModelParams) -> FeatureMap:
    """Concatenated forward/backward hidden states, (2h, L) per example"""
    Fb, single = _as_batch(F)
    _, h_fd, h_bd = _birnn_states(Fb, params)
    out = np.concatenate([h_fd, h_bd], axis=2).transpose(0, 2, 1)
    return out[0] if single else out


def _rnn_direction_backward(F_seq: np.ndarray, states: np.ndarray, d_states: np.ndarray,
                            W_dh: np.ndarray, W_hh: np.ndarray, reverse: bool):
    B, L, h = states.shape
    d_pre = np.zeros_like(states)
    d_W_hh = np.zeros_like(W_hh)
    carry = np.zeros((B, h))
    # walk opposite to the forward recurrence
    order = range(L) if reverse else range(L - 1, -1, -1)
    for i in order:
        dh = d_states[:, i] + carry
        da = dh * (1.0 - states[:, i] ** 2)
        d_pre[:, i] = da
        prev = i + 1 if reverse else i - 1
        if 0 <= prev < L:
            d_W_hh += states[:, prev].T @ da
        carry = da @ W_hh.T
    d_W_dh = np.einsum("bld,blh->dh", F_seq, d_pre)
    d_b = d_pre.sum(axis=(0, 1))
    d_F_seq = d_pre @ W_dh.T
    return d_W_dh, d_W_hh, d_b, d_F_seq


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    x: np.ndarray          # (B, 1, L)
    y: np.ndarray          # (B, 1, L)
    coarse: np.ndarray     # (B, Cc, L) before projection
    emb: np.ndarray        # (B, E)
    F_seq: np.ndarray      # (B, L, d) after the time embedding is added
    h_fd: np.ndarray       # (B, L, h)
    h_bd: np.ndarray       # (B, L, h)


def _prepare_inputs(y_t, t, x_ppg) -> Tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    y = np.asarray(y_t, dtype=np.float64)
    x = np.asarray(x_ppg, dtype=np.float64)
    if y.shape != x.shape:
        raise ShapeError(f"y_t and x_ppg lengths differ: {y.shape} vs {x.shape}")
    single = y.ndim == 1
    if single:
        y, x = y[None], x[None]
    if y.ndim != 2:
        raise ShapeError("inputs must be (L,) or (B, L)")
    steps = np.broadcast_to(np.asarray(t, dtype=np.int64), (y.shape[0],)).copy()
    return y, steps, x, single


def forward(params: ModelParams, y_t: np.ndarray, t, x_ppg: np.ndarray,
            max_t: int) -> Tuple[np.ndarray, ForwardCache]:
    """Predicted noise and the activation cache needed by ``backward``"""
    y, steps, x, single = _prepare_inputs(y_t, t, x_ppg)
    if steps.min() < 1 or steps.max() > max_t:
        raise ShapeError(f"timestep outside [1, {max_t}]")
    cfg = params.config
    xb, yb = x[:, None, :], y[:, None, :]

    fine = fine_encoder(xb, params.branches("fine_ppg"))
    coarse = coarse_encoder(xb, params.branches("coarse_ppg"))
    f_ppg = fine + cfg.lambda_ppg * _project(coarse, params)
    f_y = fine_encoder(yb, params.branches("fine_y"))

    emb = timestep_embedding(steps, cfg.time_embed_dim)
    t_feat = emb @ params["time.weight"].T + params["time.bias"]
    F = np.concatenate([f_ppg, f_y], axis=1) + t_feat[:, :, None]

    F_seq, h_fd, h_bd = _birnn_states(F, params)
    H = np.concatenate([h_fd, h_bd], axis=2)
    out = H @ params["head.weight"] + params["head.bias"][0]

    cache = ForwardCache(x=xb, y=yb, coarse=coarse, emb=emb, F_seq=F_seq, h_fd=h_fd, h_bd=h_bd)
    return (out[0] if single else out), cache


def predict_noise(y_t: np.ndarray, t, x_ppg: np.ndarray, params: ModelParams,
                  max_t: int) -> np.ndarray:
    out, _ = forward(params, y_t, t, x_ppg, max_t=max_t)
    return out


def backward(loss_grad: np.ndarray, cache: Optional[ForwardCache], params: ModelParams) -> ModelParams:
    """Exact gradients of a scalar loss given dLoss/d(output) and the forward cache"""
    if cache is None:
        raise ShapeError("backward called without a forward cache")
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    if g.shape != cache.h_fd.shape[:2]:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output {cache.h_fd.shape[:2]}")

    cfg = params.config
    grads = params.zeros_like().arrays
    h = cfg.hidden_size
    Cf = cfg.fine_channels

    H = np.concatenate([cache.h_fd, cache.h_bd], axis=2)
    grads["head.weight"] = np.einsum("bl,blk->k", g, H)
    grads["head.bias"] = np.array([g.sum()])
    dH = g[:, :, None] * params["head.weight"][None, None, :]

    dW_dh, dW_hh, db, dF_seq = _rnn_direction_backward(
        cache.F_seq, cache.h_fd, dH[:, :, :h], params["rnn.W_dh_fd"], params["rnn.W_hh_fd"], False)
    grads["rnn.W_dh_fd"], grads["rnn.W_hh_fd"], grads["rnn.b_h_fd"] = dW_dh, dW_hh, db
    dW_dh, dW_hh, db, dF_seq_bd = _rnn_direction_backward(
        cache.F_seq, cache.h_bd, dH[:, :, h:], params["rnn.W_dh_bd"], params["rnn.W_hh_bd"], True)
    grads["rnn.W_dh_bd"], grads["rnn.W_hh_bd"], grads["rnn.b_h_bd"] = dW_dh, dW_hh, db
    dF = (dF_seq + dF_seq_bd).transpose(0, 2, 1)

    d_t_feat = dF.sum(axis=2)
    grads["time.weight"] = d_t_feat.T @ cache.emb
    grads["time.bias"] = d_t_feat.sum(axis=0)

    d_f_ppg = dF[:, :Cf]
    d_f_y = dF[:, Cf:]
    _encoder_backward(cache.x, d_f_ppg, params.branches("fine_ppg"), "fine_ppg", grads)
    _encoder_backward(cache.y, d_f_y, params.branches("fine_y"), "fine_y", grads)

    d_proj = cfg.lambda_ppg * d_f_ppg
    grads["coarse_proj.weight"] = np.einsum("bfl,bcl->fc", d_proj, cache.coarse)
    d_coarse = np.einsum("fc,bfl->bcl", params["coarse_proj.weight"], d_proj)
    _encoder_backward(cache.x, d_coarse, params.branches("coarse_ppg"), "coarse_ppg", grads)

    return ModelParams(cfg, grads)


def make_denoiser(params: ModelParams, max_t: int):
    """Adapter with the (y_t, t, x_ppg) signature expected by the samplers"""
    def denoiser(y_t: np.ndarray, t: Union[int, np.ndarray], x_ppg: np.ndarray) -> np.ndarray:
        return predict_noise(y_t, t, x_ppg, params, max_t=max_t)
    return denoiser
