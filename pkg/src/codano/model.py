"""Codomain attention neural operator over per-variable token functions.

Each physical variable becomes one token function on a shared uniform latent
grid. Attention logits are quadrature inner products of query/key token
functions; key/query/value maps, the head merge, and the output integral
operator are spectral blocks shared across tokens, making the model
permutation-equivariant in the variables. Encoders move between the data mesh
and the latent grid either by graph-kernel integration (any mesh) or by exact
spectral resampling (uniform grids only).
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import (MeshError, ModeCountError, NumericError, ShapeError,
                     TrainingStateError, UnknownVariableError,
                     VariableExistsError)
from .field import GridFunction, Mesh
from .gno import KernelNet, build_neighbors, gno_set_apply
from .spectral import FnoBlock, PointwiseOp, spectral_resample

COORD_FREQUENCIES = (1, 2, 4, 8)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; fully determines the parameter set."""

    variables: tuple
    embed_dim: int = 8              # positional embedding width per variable
    latent_width: int = 32          # lifted channels per variable
    token_width: int = 0            # 0 means latent_width (one token per variable)
    n_heads: int = 4
    key_width: int = 32
    value_width: int = 32
    modes: int = 16
    encoder_layers: int = 3
    reconstructor_layers: int = 3
    predictor_layers: int = 1
    latent_resolution: tuple = (32, 32)
    use_gno: bool = True
    gno_radius: float = 0.0         # 0 means 2.5 x mean latent spacing
    gno_hidden: tuple = (32, 32)
    vspe_variant: str = "fourier"
    vspe_modes: int = 8
    temperature: float | str = "auto"
    activation: str = "gelu"
    norm_eps: float = 1e-5
    kind: str = "codano"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "latent_resolution", tuple(self.latent_resolution))
        object.__setattr__(self, "gno_hidden", tuple(self.gno_hidden))
        if len(set(self.variables)) != len(self.variables) or not self.variables:
            raise ShapeError("variables must be nonempty and unique")
        if self.token_width == 0:
            object.__setattr__(self, "token_width", self.latent_width)
        if self.latent_width % self.token_width:
            raise ShapeError(
                f"token width {self.token_width} must divide latent width "
                f"{self.latent_width}")
        if self.kind not in ("codano", "fno"):
            raise ShapeError(f"unknown model kind {self.kind!r}")
        if self.vspe_variant not in ("fourier", "coord-mlp"):
            raise ShapeError(f"unknown vspe variant {self.vspe_variant!r}")
        if self.activation != "gelu":
            raise ShapeError(f"unsupported activation {self.activation!r}")
        if self.temperature != "auto" and not float(self.temperature) > 0:
            raise ShapeError("temperature must be 'auto' or positive")
        if self.n_heads < 1:
            raise ShapeError("need at least one attention head")

    @property
    def tokens_per_variable(self) -> int:
        return self.latent_width // self.token_width

    def latent_mesh(self, extents) -> Mesh:
        return Mesh.uniform(self.latent_resolution, extents=extents)

    def radius(self, latent_mesh: Mesh) -> float:
        if self.gno_radius > 0:
            return self.gno_radius
        return 2.5 * float(np.mean(latent_mesh.spacing))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variables"] = list(self.variables)
        d["latent_resolution"] = list(self.latent_resolution)
        d["gno_hidden"] = list(self.gno_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- variable-specific positional encoders ----------------------------------


class Vspe:
    """Per-variable positional encoder, evaluable on any mesh of the domain.

    fourier: learnable complex coefficients on a truncated frequency band,
    evaluated as a Fourier series (uniform grids only).
    coord-mlp: an MLP on sinusoidal features of position (any mesh).
    """

    def __init__(self, variant: str, embed_dim: int, modes: int, dim: int = 2):
        self.variant = variant
        self.embed_dim = embed_dim
        self.modes = modes
        self.dim = dim

    @classmethod
    def from_config(cls, config: ModelConfig, dim: int = 2) -> "Vspe":
        return cls(config.vspe_variant, config.embed_dim, config.vspe_modes, dim)

    def _mlp(self, var: str) -> PointwiseOp:
        n_feat = 2 * len(COORD_FREQUENCIES) * self.dim
        hidden = max(2 * self.embed_dim, 4)
        return PointwiseOp(f"vspe.{var}", (n_feat, hidden, self.embed_dim))

    def init_var(self, store: ad.ParamStore, var: str, rng) -> None:
        if self.variant == "fourier":
            shape = (2 * self.modes,) * self.dim + (self.embed_dim,)
            scale = (2 * self.modes) ** (-self.dim / 2)
            store.add(f"vspe.{var}.re", rng.standard_normal(shape) * scale)
            store.add(f"vspe.{var}.im", rng.standard_normal(shape) * scale)
        else:
            self._mlp(var).init_params(store, rng)

    def param_names(self, var: str) -> list[str]:
        if self.variant == "fourier":
            return [f"vspe.{var}.re", f"vspe.{var}.im"]
        return self._mlp(var).param_names()

    def evaluate(self, store: ad.ParamStore, var: str, mesh: Mesh) -> ad.Tensor:
        """Embedding values at every mesh point, shape (n_points, embed_dim)."""
        if f"{self.param_names(var)[0]}" not in store:
            raise UnknownVariableError(f"no positional encoder for variable {var!r}")
        if self.variant == "fourier":
            if not mesh.is_uniform:
                raise MeshError("fourier positional encoding needs a uniform grid")
            res = mesh.resolution
            for n in res:
                if n < 2 * self.modes:
                    raise ModeCountError(
                        f"grid {res} cannot carry {self.modes} embedding modes")
            coeff = ad.make_complex(store[f"vspe.{var}.re"], store[f"vspe.{var}.im"])
            coeff = ad.reshape(coeff, (1,) + coeff.shape)
            spec = ad.corners_embed(coeff * float(np.prod(res)), res)
            emb = ad.real(ad.ifftn(spec, axes=tuple(range(1, 1 + self.dim))))
            return ad.reshape(emb, (mesh.n_points, self.embed_dim))
        feats = self.features(mesh)
        return self._mlp(var)(store, ad.Tensor(feats))

    def features(self, mesh: Mesh) -> np.ndarray:
        unit = mesh.points / np.asarray(mesh.extents)
        parts = []
        for k in COORD_FREQUENCIES:
            parts.append(np.sin(2 * np.pi * k * unit))
            parts.append(np.cos(2 * np.pi * k * unit))
        return np.concatenate(parts, axis=1)


# -- function-space normalization --------------------------------------------


def normalize(values: ad.Tensor, gain, bias, mesh: Mesh, eps: float = 1e-5) -> ad.Tensor:
    """Whiten each token function under the probability measure of the domain.

    values (T, n_points, c); mean and variance are quadrature integrals with
    weights divided by the domain measure; output = gain/(sigma+eps) *
    (values - mean) + bias.
    """
    t, n, c = values.shape
    w = mesh.quad_weights / mesh.measure
    mu = ad.einsum2("tnc,n->tc", values, w)
    centered = values - ad.reshape(mu, (t, 1, c))
    var = ad.einsum2("tnc,n->tc", centered * centered, w)
    # tiny floor keeps the sqrt differentiable at exactly-constant tokens
    sigma = ad.tsqrt(var + 1e-24)
    scale = ad.as_tensor(gain) / (sigma + eps)
    return centered * ad.reshape(scale, (t, 1, c)) + ad.as_tensor(bias)


# -- one attention layer ------------------------------------------------------


class CodanoLayer:
    """Multi-head function-space attention + normalization + integral block."""

    def __init__(self, name: str, config: ModelConfig):
        self.name = name
        self.config = config
        d_t = config.token_width
        self.heads = []
        for h in range(config.n_heads):
            self.heads.append((
                FnoBlock(f"{name}.head{h}.key", d_t, config.key_width,
                         config.modes, activation=False),
                FnoBlock(f"{name}.head{h}.query", d_t, config.key_width,
                         config.modes, activation=False),
                FnoBlock(f"{name}.head{h}.value", d_t, config.value_width,
                         config.modes, activation=False),
            ))
        self.merge = FnoBlock(f"{name}.merge", config.n_heads * config.value_width,
                              d_t, config.modes, activation=False)
        self.iper = FnoBlock(f"{name}.iper", d_t, d_t, config.modes, activation=True)

    def init_params(self, store: ad.ParamStore, rng) -> None:
        for ops in self.heads:
            for op in ops:
                op.init_params(store, rng)
        self.merge.init_params(store, rng)
        self.iper.init_params(store, rng)
        store.add(f"{self.name}.norm.gain", np.ones(self.config.token_width))
        store.add(f"{self.name}.norm.bias", np.zeros(self.config.token_width))

    def param_names(self) -> list[str]:
        names = []
        for ops in self.heads:
            for op in ops:
                names.extend(op.param_names())
        names.extend(self.merge.param_names())
        names.extend(self.iper.param_names())
        names.extend([f"{self.name}.norm.gain", f"{self.name}.norm.bias"])
        return names

    def temperature(self, mesh: Mesh) -> float:
        if self.config.temperature == "auto":
            return float(np.sqrt(self.config.key_width) * mesh.measure)
        return float(self.config.temperature)

    def attention_rows(self, store: ad.ParamStore, tokens, mesh: Mesh) -> np.ndarray:
        """Softmax attention matrices per head, shape (heads, T, T); no grads."""
        tokens = ad.as_tensor(tokens)
        t = tokens.shape[0]
        res = mesh.resolution
        w = mesh.quad_weights
        tau = self.temperature(mesh)
        rows = np.empty((len(self.heads), t, t))
        with ad.no_grad():
            for h, (key_op, query_op, _) in enumerate(self.heads):
                k = key_op(store, tokens, res)
                q = query_op(store, tokens, res)
                logits = ad.einsum2("jnc,mnc->jm", q * w[None, :, None], k) / tau
                rows[h] = ad.softmax_rows(logits).data
        return rows

    def attention(self, store: ad.ParamStore, tokens: ad.Tensor, mesh: Mesh) -> ad.Tensor:
        """Per head: logits = <query_j, key_m>/tau, row-softmax, mix values."""
        t, n, d = tokens.shape
        if d != self.config.token_width:
            raise ShapeError(f"expected token width {self.config.token_width}, got {d}")
        res = mesh.resolution
        w = mesh.quad_weights
        tau = self.temperature(mesh)
        outs = []
        for key_op, query_op, value_op in self.heads:
            k = key_op(store, tokens, res)
            q = query_op(store, tokens, res)
            v = value_op(store, tokens, res)
            logits = ad.einsum2("jnc,mnc->jm", q * w[None, :, None], k) / tau
            if not np.all(np.isfinite(logits.data)):
                raise NumericError("attention logits are not finite")
            att = ad.softmax_rows(logits)
            # mix values with a value-sorted reduction so that permuting the
            # tokens permutes the output bit-identically
            terms = (ad.reshape(ad.transpose(att, (1, 0)), (t, t, 1, 1))
                     * ad.reshape(v, (t, 1, n, self.config.value_width)))
            outs.append(ad.ordered_sum(terms, axis=0))
        mixed = outs[0] if len(outs) == 1 else ad.concat(outs, axis=2)
        return self.merge(store, mixed, res)

    def __call__(self, store: ad.ParamStore, tokens: ad.Tensor, mesh: Mesh) -> ad.Tensor:
        o = self.attention(store, tokens, mesh)
        o = normalize(o, store[f"{self.name}.norm.gain"],
                      store[f"{self.name}.norm.bias"], mesh, self.config.norm_eps)
        return self.iper(store, o + tokens, mesh.resolution)


# -- model assembly -----------------------------------------------------------


@dataclass
class _Ops:
    vspe: Vspe
    lift: PointwiseOp
    proj: PointwiseOp
    enc_kernel: KernelNet | None
    dec_kernel: KernelNet | None
    encoder: list
    reconstructor: list
    predictor: list
    fno_stack: list = field(default_factory=list)


@functools.lru_cache(maxsize=64)
def _ops(config: ModelConfig) -> _Ops:
    d, w = config.latent_width, config.embed_dim
    if config.kind == "fno":
        d_in = len(config.variables)
        stack = [FnoBlock(f"fno.layer{i}", d, d, config.modes, activation=True)
                 for i in range(config.encoder_layers)]
        return _Ops(
            vspe=Vspe.from_config(config),
            lift=PointwiseOp("lift", (d_in, 2 * d, d)),
            proj=PointwiseOp("proj", (d, 2 * d, d_in)),
            enc_kernel=None, dec_kernel=None,
            encoder=[], reconstructor=[], predictor=[], fno_stack=stack)
    enc_k = KernelNet("gno_enc", 2, d, d, hidden=config.gno_hidden) if config.use_gno else None
    dec_k = KernelNet("gno_dec", 2, d, d, hidden=config.gno_hidden) if config.use_gno else None
    return _Ops(
        vspe=Vspe.from_config(config),
        lift=PointwiseOp("lift", (1 + w, 2 * d, d)),
        proj=PointwiseOp("proj", (d, 2 * d, 1)),
        enc_kernel=enc_k, dec_kernel=dec_k,
        encoder=[CodanoLayer(f"encoder.layer{i}", config)
                 for i in range(config.encoder_layers)],
        reconstructor=[CodanoLayer(f"reconstructor.layer{i}", config)
                       for i in range(config.reconstructor_layers)],
        predictor=[CodanoLayer(f"predictor.layer{i}", config)
                   for i in range(config.predictor_layers)])


def init_params(config: ModelConfig) -> ad.ParamStore:
    """Fresh parameters in a deterministic creation order; no predictor head
    (the predictor is added by extend_variables when fine-tuning begins)."""
    rng = np.random.default_rng(config.seed)
    ops = _ops(config)
    store = ad.ParamStore()
    if config.kind == "fno":
        ops.lift.init_params(store, rng)
        for block in ops.fno_stack:
            block.init_params(store, rng)
        ops.proj.init_params(store, rng)
        return store
    for var in config.variables:
        ops.vspe.init_var(store, var, rng)
    ops.lift.init_params(store, rng)
    if config.use_gno:
        ops.enc_kernel.init_params(store, rng)
        ops.dec_kernel.init_params(store, rng)
    for layer in ops.encoder + ops.reconstructor:
        layer.init_params(store, rng)
    ops.proj.init_params(store, rng)
    return store


def has_predictor(params: ad.ParamStore, config: ModelConfig) -> bool:
    ops = _ops(config)
    return bool(ops.predictor) and ops.predictor[0].param_names()[0] in params


def extend_variables(params: ad.ParamStore, config: ModelConfig,
                     new_variables, seed: int | None = None):
    """New config/params with fresh encoders for the new variables and a
    fresh predictor head; every prior non-predictor entry is copied
    bit-identically."""
    new_variables = tuple(new_variables)
    for var in new_variables:
        if var in config.variables:
            raise VariableExistsError(f"variable {var!r} already registered")
    if len(set(new_variables)) != len(new_variables):
        raise VariableExistsError("duplicate names in new variables")
    new_config = replace(config, variables=config.variables + new_variables)
    ops = _ops(new_config)
    predictor_names = {n for layer in ops.predictor for n in layer.param_names()}
    rng = np.random.default_rng([config.seed if seed is None else seed, 0x5EED])
    store = ad.ParamStore()
    for name, tensor in params.items():
        if name not in predictor_names:
            store.add(name, tensor.data.copy())
    for var in new_variables:
        ops.vspe.init_var(store, var, rng)
    for layer in ops.predictor:
        layer.init_params(store, rng)
    return store, new_config


def _tokens_from_groups(grouped: ad.Tensor, config: ModelConfig) -> ad.Tensor:
    """(n_vars, n, latent_width) -> (n_tokens, n, token_width)."""
    g, n, d = grouped.shape
    t = g * config.tokens_per_variable
    flat = ad.reshape(ad.transpose(grouped, (1, 0, 2)), (n, t, config.token_width))
    return ad.transpose(flat, (1, 0, 2))


def _groups_from_tokens(tokens: ad.Tensor, config: ModelConfig, n_vars: int) -> ad.Tensor:
    t, n, d_t = tokens.shape
    flat = ad.transpose(tokens, (1, 0, 2))
    grouped = ad.reshape(flat, (n, n_vars, config.latent_width))
    return ad.transpose(grouped, (1, 0, 2))


def _check_in_domain(query_mesh: Mesh, extents) -> None:
    box = np.asarray(extents)
    pts = query_mesh.points
    if np.any(pts < -1e-9) or np.any(pts > box + 1e-9):
        raise MeshError("query mesh extends outside the model domain box")


def _neighbor_lookup(cache, key, query_mesh, source_mesh, r):
    """Build or reuse a neighbor index; the caller keys on the data meshes it
    keeps alive (the latent mesh is derived from config and extents)."""
    if cache is None:
        return build_neighbors(query_mesh, source_mesh, r)
    if key not in cache:
        cache[key] = build_neighbors(query_mesh, source_mesh, r)
    return cache[key]


def model_forward(params: ad.ParamStore, config: ModelConfig, a: GridFunction,
                  query_mesh: Mesh | None = None, head: str = "reconstructor",
                  cache: dict | None = None) -> ad.Tensor:
    """Full pipeline; returns output values (n_query, n_input_variables).

    Variables are bound strictly by name, in the input's order, so permuting
    input channels (with their names) permutes output channels bit-identically.
    A subset of the registered variables is a valid input.
    """
    if query_mesh is None:
        query_mesh = a.mesh
    _check_in_domain(query_mesh, a.mesh.extents)
    if config.kind == "fno":
        return _fno_forward(params, config, a, query_mesh)
    if a.names is None:
        raise UnknownVariableError("input function must carry variable names")
    if head not in ("reconstructor", "predictor"):
        raise ShapeError(f"unknown head {head!r}")
    ops = _ops(config)
    head_layers = ops.reconstructor if head == "reconstructor" else ops.predictor
    if head == "predictor" and not has_predictor(params, config):
        raise TrainingStateError(
            "predictor head has no parameters; call extend_variables first")
    for var in a.names:
        if var not in config.variables:
            raise UnknownVariableError(f"variable {var!r} not registered")

    n_in, d_in = a.values.shape
    latent_mesh = config.latent_mesh(a.mesh.extents)

    per_var = []
    for idx, var in enumerate(a.names):
        col = ad.Tensor(np.ascontiguousarray(a.values[:, idx:idx + 1]))
        if config.embed_dim > 0:
            emb = ops.vspe.evaluate(params, var, a.mesh)
            per_var.append(ad.concat([col, emb], axis=1))
        else:
            per_var.append(col)
    stacked = ad.stack(per_var, axis=0)           # (d_in, n_in, 1 + embed)
    lifted = ops.lift(params, stacked)            # (d_in, n_in, latent_width)

    d = config.latent_width
    if config.use_gno:
        r = config.radius(latent_mesh)
        vals = ad.reshape(ad.transpose(lifted, (1, 0, 2)), (n_in, d_in * d))
        key = ("enc", id(a.mesh), r, config.latent_resolution, a.mesh.extents)
        nbrs = _neighbor_lookup(cache, key, latent_mesh, a.mesh, r)
        lat = gno_set_apply(ops.enc_kernel, params, nbrs, vals, groups=d_in)
        lat = ad.transpose(ad.reshape(lat, (latent_mesh.n_points, d_in, d)), (1, 0, 2))
    else:
        if not a.mesh.is_uniform:
            raise MeshError("spectral transfer to the latent grid needs a uniform mesh")
        lat = spectral_resample(lifted, a.mesh.resolution, config.latent_resolution)

    tokens = _tokens_from_groups(lat, config)
    for layer in ops.encoder:
        tokens = layer(params, tokens, latent_mesh)
    for layer in head_layers:
        tokens = layer(params, tokens, latent_mesh)
    grouped = _groups_from_tokens(tokens, config, d_in)

    if config.use_gno:
        r = config.radius(latent_mesh)
        vals = ad.reshape(ad.transpose(grouped, (1, 0, 2)),
                          (latent_mesh.n_points, d_in * d))
        key = ("dec", id(query_mesh), r, config.latent_resolution, a.mesh.extents)
        nbrs = _neighbor_lookup(cache, key, query_mesh, latent_mesh, r)
        out = gno_set_apply(ops.dec_kernel, params, nbrs, vals, groups=d_in)
        out = ad.transpose(ad.reshape(out, (query_mesh.n_points, d_in, d)), (1, 0, 2))
    else:
        if not query_mesh.is_uniform:
            raise MeshError("spectral transfer to the query mesh needs a uniform mesh")
        out = spectral_resample(grouped, config.latent_resolution, query_mesh.resolution)

    projected = ops.proj(params, out)             # (d_in, n_query, 1)
    return ad.reshape(ad.transpose(projected, (1, 0, 2)), (query_mesh.n_points, d_in))


def _fno_forward(params, config, a, query_mesh):
    if not a.mesh.is_uniform or not query_mesh.is_uniform:
        raise MeshError("the spectral baseline needs uniform meshes")
    names = a.names if a.names is not None else config.variables
    if tuple(names) != tuple(config.variables):
        order = [list(names).index(v) for v in config.variables
                 if v in names]
        if len(order) != len(config.variables):
            raise UnknownVariableError(
                f"baseline input must carry variables {config.variables}")
        values = a.values[:, order]
    else:
        values = a.values
    ops = _ops(config)
    x = ops.lift(params, ad.Tensor(values[None]))
    for block in ops.fno_stack:
        x = block(params, x, a.mesh.resolution)
    x = ops.proj(params, x)
    x = spectral_resample(x, a.mesh.resolution, query_mesh.resolution)
    return ad.reshape(x, (query_mesh.n_points, len(config.variables)))


def predict(params: ad.ParamStore, config: ModelConfig, a: GridFunction,
            query_mesh: Mesh | None = None, head: str = "reconstructor",
            cache: dict | None = None) -> GridFunction:
    """Forward pass without gradient tracking, wrapped as a grid function."""
    if query_mesh is None:
        query_mesh = a.mesh
    with ad.no_grad():
        out = model_forward(params, config, a, query_mesh, head, cache)
    names = a.names if config.kind == "codano" else tuple(config.variables)
    return GridFunction(query_mesh, out.data, names=names)
