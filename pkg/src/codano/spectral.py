"""Pointwise and Fourier-space operators on token batches.

Operator objects are descriptors: they hold a parameter name prefix and the
layer dimensions, while the actual arrays live in a ParamStore. Everything
takes batched token values of shape (batch, n_points, channels) so that one
shared operator applies across the batch/token axis (permutation equivariance
by weight sharing).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ModeCountError, ShapeError


def glorot(rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Glorot-scaled normal init."""
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.standard_normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))


class PointwiseOp:
    """Shared MLP applied independently at every point (maps the last axis).

    widths = (d_in, hidden..., d_out); GELU between layers, linear output.
    """

    def __init__(self, name: str, widths, hidden_activation: bool = True):
        if len(widths) < 2:
            raise ShapeError("PointwiseOp needs at least input and output widths")
        self.name = name
        self.widths = tuple(int(w) for w in widths)
        self.hidden_activation = hidden_activation

    def init_params(self, store: ad.ParamStore, rng) -> None:
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            store.add(f"{self.name}.w{i}", glorot(rng, a, b))
            store.add(f"{self.name}.b{i}", np.zeros(b))

    def param_names(self) -> list[str]:
        n_layers = len(self.widths) - 1
        return [f"{self.name}.{k}{i}" for i in range(n_layers) for k in ("w", "b")]

    def __call__(self, store: ad.ParamStore, x: ad.Tensor) -> ad.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(
                f"{self.name}: expected last axis {self.widths[0]}, got {x.shape[-1]}"
            )
        n_layers = len(self.widths) - 1
        lead = x.shape[:-1]
        out = ad.reshape(x, (-1, self.widths[0]))
        for i in range(n_layers):
            w = store[f"{self.name}.w{i}"]
            b = store[f"{self.name}.b{i}"]
            out = ad.einsum2("ni,io->no", out, w) + b
            if self.hidden_activation and i < n_layers - 1:
                out = ad.gelu(out)
        return ad.reshape(out, lead + (self.widths[-1],))


class FnoBlock:
    """One Fourier layer: spectral multiply on a retained band + pointwise bypass.

    Input (batch, n_points, d_in) with a uniform grid resolution; the retained
    band keeps per-axis FFT bins [0, m) and [-m, -1], so the complex weights
    have shape (2*m1, ..., 2*md, d_in, d_out) and are resolution-independent.
    Complex weights are stored as paired real tensors.
    """

    def __init__(self, name: str, d_in: int, d_out: int, modes, dim: int = 2,
                 activation: bool = True, bypass: bool = True):
        self.name = name
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.modes = tuple(int(m) for m in np.broadcast_to(np.atleast_1d(modes), (dim,)))
        if any(m < 1 for m in self.modes):
            raise ModeCountError(f"retained modes must be >= 1, got {self.modes}")
        self.dim = dim
        self.activation = activation
        self.bypass = bypass

    def init_params(self, store: ad.ParamStore, rng) -> None:
        shape = tuple(2 * m for m in self.modes) + (self.d_in, self.d_out)
        scale = 1.0 / np.sqrt(self.d_in * self.d_out)
        store.add(f"{self.name}.spec_re", rng.standard_normal(shape) * scale)
        store.add(f"{self.name}.spec_im", rng.standard_normal(shape) * scale)
        if self.bypass:
            store.add(f"{self.name}.byp_w", glorot(rng, self.d_in, self.d_out))
        store.add(f"{self.name}.bias", np.zeros(self.d_out))

    def param_names(self) -> list[str]:
        names = [f"{self.name}.spec_re", f"{self.name}.spec_im"]
        if self.bypass:
            names.append(f"{self.name}.byp_w")
        names.append(f"{self.name}.bias")
        return names

    def __call__(self, store: ad.ParamStore, x: ad.Tensor, resolution) -> ad.Tensor:
        res = tuple(int(n) for n in resolution)
        if len(res) != self.dim:
            raise ShapeError(f"{self.name}: expected {self.dim}D resolution, got {res}")
        for m, n in zip(self.modes, res):
            if n < 2 * m:
                raise ModeCountError(
                    f"{self.name}: resolution {n} cannot carry {m} retained modes"
                )
        batch, n_pts, d_in = x.shape
        if n_pts != int(np.prod(res)) or d_in != self.d_in:
            raise ShapeError(f"{self.name}: bad input shape {x.shape} for grid {res}")
        grid = ad.reshape(x, (batch,) + res + (d_in,))
        axes = tuple(range(1, 1 + self.dim))
        spec = ad.fftn(grid, axes=axes)
        corners = ad.corners_extract(spec, self.modes)
        w = ad.make_complex(store[f"{self.name}.spec_re"], store[f"{self.name}.spec_im"])
        sub = "".join(chr(ord("u") + i) for i in range(self.dim))
        mixed = ad.einsum2(f"b{sub}i,{sub}io->b{sub}o", corners, w)
        out_spec = ad.corners_embed(mixed, res)
        out = ad.real(ad.ifftn(out_spec, axes=axes))
        out = ad.reshape(out, (batch, n_pts, self.d_out))
        if self.bypass:
            out = out + ad.einsum2("bni,io->bno", x, store[f"{self.name}.byp_w"])
        out = out + store[f"{self.name}.bias"]
        if self.activation:
            out = ad.gelu(out)
        return out


def set_apply(fn, x: ad.Tensor, groups: int) -> ad.Tensor:
    """Apply one shared operator per width-d group of a (n, groups*d) function.

    The groups move onto the batch axis, so permuting them permutes outputs
    bit-identically (Eq.-style weight sharing across the codomain).
    """
    n, total = x.shape
    if total % groups:
        raise ShapeError(f"{total} channels do not split into {groups} groups")
    d = total // groups
    xg = ad.transpose(ad.reshape(x, (n, groups, d)), (1, 0, 2))
    yg = fn(xg)
    return ad.reshape(ad.transpose(yg, (1, 0, 2)), (n, yg.shape[-1] * groups))


def spectral_resample(x: ad.Tensor, old_res, new_res) -> ad.Tensor:
    """Differentiable band-limited resampling between uniform grids.

    x is (batch, n_old, c); exact when the field is band-limited under both
    Nyquist bands.
    """
    old_res, new_res = tuple(old_res), tuple(new_res)
    if old_res == new_res:
        return x
    batch, n_pts, c = x.shape
    if n_pts != int(np.prod(old_res)):
        raise ShapeError(f"bad input shape {x.shape} for grid {old_res}")
    m = tuple(min(a, b) // 2 for a, b in zip(old_res, new_res))
    axes = tuple(range(1, 1 + len(old_res)))
    grid = ad.reshape(x, (batch,) + old_res + (c,))
    spec = ad.fftn(grid, axes=axes)
    corners = ad.corners_extract(spec, m)
    scale = float(np.prod(new_res) / np.prod(old_res))
    out_spec = ad.corners_embed(corners * scale, new_res)
    out = ad.real(ad.ifftn(out_spec, axes=axes))
    return ad.reshape(out, (batch, int(np.prod(new_res)), c))
