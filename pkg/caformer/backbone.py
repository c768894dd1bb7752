"""
The Caformer block stack.

    X (..., M, L_in)
      -> patches, in-patch normalization          (..., M, P, N)
      -> shared patch embedding + position table  (..., N, M, E)
      -> blocks x {dependency learner, dynamic learner,
                   environment learner, intervention fusion}
      -> S_temporal                               (..., N, M, E)

Every stage is written with caformer.numerics kernels, so a forward pass under
a recording ComputeGraph is differentiable end to end. Leading batch axes are
carried through unchanged.
"""
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from caformer import numerics as nx
from caformer.errors import ContractError
from caformer.numerics import NdArray, uniform_init
from caformer.patching import PatchSet, in_patch_normalize, make_patches, patch_count

ABLATIONS = ("full", "no_dep", "no_dyn", "no_env")

# sensitivity-study defaults
DEFAULT_P = 16
DEFAULT_S = 8
DEFAULT_BLOCKS = 3
DEFAULT_K = 256


@dataclass
class CaformerConfig:
    """
    Description:
        Backbone hyper-parameters. beta=None means beta = E; alpha scales the
        dynamic-learner scores, whose vectors have length one.
    """

    M: int
    L_in: int
    P: int = DEFAULT_P
    S: int = DEFAULT_S
    E: int = 16
    k: int = DEFAULT_K
    blocks: int = DEFAULT_BLOCKS
    alpha: float = 1.0
    beta: Optional[float] = None

    def __post_init__(self):
        if self.M < 1:
            raise ContractError("M must be >= 1, got %r" % self.M)
        patch_count(self.L_in, self.P, self.S)
        if self.blocks < 1 or self.E < 1 or self.k < 1:
            raise ContractError("need blocks >= 1, E >= 1 and k >= 1, got %r, %r, %r" % (self.blocks, self.E, self.k))
        if self.beta is None:
            self.beta = float(self.E)
        if self.alpha <= 0 or self.beta <= 0:
            raise ContractError("alpha and beta must be positive, got %r, %r" % (self.alpha, self.beta))

    @property
    def N(self):
        return patch_count(self.L_in, self.P, self.S)

    @classmethod
    def desk(cls, M, L_in, **overrides):
        """Small-run configuration with the aligning matrix tied to the patch axis (k = N)."""
        config = cls(M=M, L_in=L_in, **overrides)
        if "k" not in overrides:
            config.k = config.N
        return config

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


class CaformerParams(Mapping):
    """
    Named learnable arrays. Names are stable across save/load:

        embed.weight (P, E)  embed.bias (E)  embed.position (N, E)
        block{b}.dep.{dim,time}.{q,k,v}.{weight,bias}
        block{b}.dyn.fc.{weight,bias}                    (M, M), (M)
        block{b}.env.fe.{weight,bias}                    (E, E), (E)
        block{b}.env.{alpha1,alpha2,gamma1,gamma2}       (E)
        block{b}.env.proj.{weight,bias}                  (E, E), (E)
        block{b}.env.proj.resample.{weight,bias}         (N, k), (k)    k != N only
        block{b}.fuse.fc.{weight,bias}                   (3E, E), (E)
        block{b}.fuse.{down,up}.{weight,bias}            (N, k), (k, N) k != N only
        head.{weight,bias}                               see caformer.heads
    """

    def __init__(self, arrays=None):
        self._arrays = {}
        for name, value in (arrays or {}).items():
            self._arrays[name] = value if isinstance(value, NdArray) else NdArray(value, name=name)
            self._arrays[name].name = name

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def state(self):
        """Copies of every array, keyed by name."""
        return {name: np.array(a.data) for name, a in self._arrays.items()}

    def load_state(self, state):
        missing = set(self._arrays) ^ set(state)
        if missing:
            raise ContractError("parameter names differ: %s" % sorted(missing))
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self._arrays[name].shape:
                raise ContractError("%s: shape %s, expected %s" % (name, value.shape, self._arrays[name].shape))
            self._arrays[name].data = np.array(value)

    @property
    def size(self):
        return sum(a.size for a in self._arrays.values())


def init_backbone_params(config: CaformerConfig, rng):
    """Uniform(+-1/sqrt(fan_in)) weights and position table, zero biases, alpha = 1, gamma = 0."""
    E, N, M, k = config.E, config.N, config.M, config.k
    arrays = {}

    def linear(prefix, fan_in, fan_out):
        arrays[prefix + ".weight"] = uniform_init(rng, (fan_in, fan_out), fan_in)
        arrays[prefix + ".bias"] = np.zeros(fan_out)

    linear("embed", config.P, E)
    arrays["embed.position"] = uniform_init(rng, (N, E), E)
    for b in range(config.blocks):
        block = "block%d" % b
        for stage in ("dim", "time"):
            for proj in ("q", "k", "v"):
                linear("%s.dep.%s.%s" % (block, stage, proj), E, E)
        linear(block + ".dyn.fc", M, M)
        linear(block + ".env.fe", E, E)
        arrays[block + ".env.alpha1"] = np.ones(E)
        arrays[block + ".env.alpha2"] = np.ones(E)
        arrays[block + ".env.gamma1"] = np.zeros(E)
        arrays[block + ".env.gamma2"] = np.zeros(E)
        if k != N:
            linear(block + ".env.proj.resample", N, k)
        linear(block + ".env.proj", E, E)
        linear(block + ".fuse.fc", 3 * E, E)
        if k != N:
            linear(block + ".fuse.down", N, k)
            linear(block + ".fuse.up", k, N)
    return arrays


def shift_env_offsets(params, rng, low=0.05, high=0.15):
    """
    Draw every gamma1/gamma2 from Uniform(low, high) in place. At the zero
    init, ReLU(alpha1 * S_e + gamma1) sits on its kink wherever S_e is 0, and
    finite differences there disagree with the tape.
    """
    names = [name for name in params if name.endswith((".env.gamma1", ".env.gamma2"))]
    for name in names:
        params[name].data = rng.uniform(low, high, size=params[name].shape)
    return names


@dataclass
class BlockDiagnostics:
    A_d: np.ndarray
    H_e: Optional[np.ndarray]
    H_ce: Optional[np.ndarray]
    C: Optional[np.ndarray]
    I_de: np.ndarray
    T: np.ndarray
    s_temporal: Optional[np.ndarray] = None
    dim_attention: Optional[np.ndarray] = None
    time_attention: Optional[np.ndarray] = None


@dataclass
class BackboneOutput:
    s_temporal: NdArray
    blocks: List[BlockDiagnostics] = field(default_factory=list)
    patches: Optional[PatchSet] = None


def embed_patches(ps: PatchSet, params):
    """Shared affine P -> E on every (dimension, patch) plus the position table; (..., N, M, E)."""
    # (..., M, P, N) -> (..., N, M, P)
    tokens = np.ascontiguousarray(np.moveaxis(ps.patches, (-3, -2, -1), (-2, -1, -3)))
    out = nx.affine(tokens, params["embed.weight"], params["embed.bias"])
    position = params["embed.position"]
    return nx.add(out, nx.reshape(position, (position.shape[0], 1, position.shape[1])))


def _attend(x, params, prefix):
    width = x.shape[-1]
    q = nx.affine(x, params[prefix + ".q.weight"], params[prefix + ".q.bias"])
    k = nx.affine(x, params[prefix + ".k.weight"], params[prefix + ".k.bias"])
    v = nx.affine(x, params[prefix + ".v.weight"], params[prefix + ".v.bias"])
    weights = nx.softmax(nx.scale(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(width)))
    return nx.standardize(nx.add(x, nx.matmul(weights, v))), weights


def dependency_learner(I, params, block=0, trace=None):
    """
    Single-head attention across dimensions within each patch, then across
    patches within each dimension, each followed by residual + standardization.
    No attention is paid to points of one time step across dimensions.
    """
    prefix = "block%d.dep" % block
    x, dim_weights = _attend(I, params, prefix + ".dim")
    y, time_weights = _attend(nx.swapaxes(x, -3, -2), params, prefix + ".time")
    if trace is not None:
        trace["dim_attention"] = dim_weights.data
        trace["time_attention"] = time_weights.data
    return nx.swapaxes(y, -3, -2)


def dynamic_alignment(z, alpha):
    """Row-renormalized softmax(z z^T / sqrt(alpha)) for z shaped (..., M, 1)."""
    if alpha <= 0:
        raise ContractError("alpha must be positive, got %r" % alpha)
    scores = nx.scale(nx.matmul(z, nx.swapaxes(z, -1, -2)), 1.0 / math.sqrt(alpha))
    return nx.row_normalize(nx.softmax(scores))


def dynamic_learner(I_de, params, alpha, block=0):
    """Returns (A_d (..., N, M, M), D = A_d I_de (..., N, M, E))."""
    prefix = "block%d.dyn.fc" % block
    pooled = nx.mean_last(I_de)
    z = nx.affine(pooled, params[prefix + ".weight"], params[prefix + ".bias"])
    A_d = dynamic_alignment(nx.reshape(z, z.shape + (1,)), alpha)
    return A_d, nx.matmul(A_d, I_de)


def causal_mask(H_e):
    """Zero every entry above the diagonal of the trailing square matrix."""
    H_e = nx.as_array(H_e)
    if H_e.ndim < 2 or H_e.shape[-1] != H_e.shape[-2]:
        raise ContractError("causal_mask needs square matrices, got shape %s" % (H_e.shape,))
    k = H_e.shape[-1]
    return nx.masked_fill(H_e, np.triu(np.ones((k, k), dtype=bool), 1), 0.0)


def _resample_patch_axis(x, params, prefix):
    """Learned affine map over the second-to-last axis of x."""
    moved = nx.affine(nx.swapaxes(x, -1, -2), params[prefix + ".weight"], params[prefix + ".bias"])
    return nx.swapaxes(moved, -1, -2)


def environment_learner(I_de, params, config: CaformerConfig, block=0):
    """
    Returns (C (..., N, M, E), H_e (..., k, k), H_ce (..., k, k)).

    C = alpha2 * ReLU(alpha1 * ReLU(F_e(I_de)) + gamma1) + gamma2; the tokens
    behind H_e are C pooled over dimensions, resampled N -> k and projected
    E -> E.
    """
    prefix = "block%d.env" % block
    s_e = nx.relu(nx.affine(I_de, params[prefix + ".fe.weight"], params[prefix + ".fe.bias"]))
    inner = nx.relu(nx.add(nx.multiply(s_e, params[prefix + ".alpha1"]), params[prefix + ".gamma1"]))
    C = nx.add(nx.multiply(inner, params[prefix + ".alpha2"]), params[prefix + ".gamma2"])

    pooled = nx.mean_last(nx.swapaxes(C, -1, -2))
    if config.k != config.N:
        pooled = _resample_patch_axis(pooled, params, prefix + ".proj.resample")
    tokens = nx.affine(pooled, params[prefix + ".proj.weight"], params[prefix + ".proj.bias"])
    scores = nx.scale(nx.matmul(tokens, nx.swapaxes(tokens, -1, -2)), 1.0 / math.sqrt(config.beta))
    H_e = nx.row_normalize(nx.softmax(scores))
    return C, H_e, causal_mask(H_e)


def intervene_fuse(D, C, I_de, H_ce, params, config: CaformerConfig, block=0):
    """Returns (S_temporal, T) with T = standardize(H_ce-weighted fusion) and S_temporal = T + I_de."""
    prefix = "block%d.fuse" % block
    fused = nx.affine(nx.concat([D, C, I_de]), params[prefix + ".fc.weight"], params[prefix + ".fc.bias"])
    N, M, E = fused.shape[-3:]
    flat = nx.reshape(fused, fused.shape[:-2] + (M * E,))
    if config.k != config.N:
        flat = _resample_patch_axis(flat, params, prefix + ".down")
    mixed = nx.matmul(H_ce, flat)
    if config.k != config.N:
        mixed = _resample_patch_axis(mixed, params, prefix + ".up")
    T = nx.standardize(nx.reshape(mixed, fused.shape))
    return nx.add(T, I_de), T


def backbone_forward(X, config: CaformerConfig, params, ablation="full", trace=False):
    """
    Run the block stack on X shaped (..., M, L_in). ablation switches one
    learner off: no_dep skips the dependency learner, no_dyn replaces A_d by
    the identity, no_env drops the fused path so S_temporal = I_de.
    """
    if ablation not in ABLATIONS:
        raise ContractError("unknown ablation %r, expected one of %s" % (ablation, ABLATIONS))
    X = X.data if isinstance(X, NdArray) else np.asarray(X, dtype=np.float64)
    if X.shape[-2:] != (config.M, config.L_in):
        raise ContractError("input shape %s does not end in (M, L_in) = (%d, %d)" % (X.shape, config.M, config.L_in))

    ps = in_patch_normalize(make_patches(X, config.P, config.S))
    x = embed_patches(ps, params)
    output = BackboneOutput(s_temporal=x, patches=ps)
    for b in range(config.blocks):
        attention = {}
        I_de = x if ablation == "no_dep" else dependency_learner(x, params, b, attention if trace else None)
        if ablation == "no_dyn":
            A_d = nx.NdArray(np.broadcast_to(np.eye(config.M), I_de.shape[:-2] + (config.M, config.M)))
            D = I_de
        else:
            A_d, D = dynamic_learner(I_de, params, config.alpha, b)
        if ablation == "no_env":
            C = H_e = H_ce = None
            T = nx.NdArray(np.zeros(I_de.shape))
            x = I_de
        else:
            C, H_e, H_ce = environment_learner(I_de, params, config, b)
            x, T = intervene_fuse(D, C, I_de, H_ce, params, config, b)
        if trace:
            output.blocks.append(BlockDiagnostics(
                A_d=A_d.data, H_e=None if H_e is None else H_e.data, H_ce=None if H_ce is None else H_ce.data,
                C=None if C is None else C.data, I_de=I_de.data, T=T.data, s_temporal=x.data,
                dim_attention=attention.get("dim_attention"), time_attention=attention.get("time_attention")))
    output.s_temporal = x
    return output
