"""Flow layers: masked affine couplings, fixed permutations, and a
dimension-reducing funnel with a Gaussian decoder.

Every layer exposes two directions.  ``normalize`` maps data toward the
base space on a Tape (differentiable, used for likelihoods and
training); ``generate`` maps base draws toward data space in plain
numpy (used for sampling).  Conditioning variables enter every
conditioner network alongside the layer inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import MlpSpec, ParamStore, ShapeError, Tape, init_mlp_params, mlp_forward


class NonFiniteError(RuntimeError):
    """A layer produced NaN or inf; ``layer`` names where."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{layer}: {message}")
        self.layer = layer


def soft_clamp(raw, clamp: float, tape: Tape | None = None):
    """Bound raw scale outputs to (-clamp, clamp) smoothly."""
    if tape is None:
        return clamp * np.tanh(np.asarray(raw, dtype=float) / clamp)
    return tape.scale(tape.tanh(tape.scale(raw, 1.0 / clamp)), clamp)


def _check_finite(arr: np.ndarray, layer: str, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}", layer=layer)


def _split_halves(tape: Tape, out, n: int):
    shift = tape.take(out, np.arange(n))
    raw = tape.take(out, np.arange(n, 2 * n))
    return shift, raw


@dataclass
class CouplingLayer:
    """Masked affine coupling.  ``mask`` marks the transformed entries;
    the rest pass through and drive the conditioner together with the
    conditioning variables."""

    name: str
    dim: int
    mask: np.ndarray
    conditioner: MlpSpec
    clamp: float = 2.0
    trans_idx: np.ndarray = field(init=False, repr=False)
    pass_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.dim,):
            raise ShapeError(f"mask must have shape ({self.dim},)", tensor=self.name)
        n_t = int(self.mask.sum())
        if n_t == 0 or n_t == self.dim:
            raise ShapeError("mask must transform at least one entry and pass at least one", tensor=self.name)
        if self.clamp <= 0:
            raise ValueError(f"{self.name}: clamp must be positive")
        self.trans_idx = np.where(self.mask)[0]
        self.pass_idx = np.where(~self.mask)[0]
        if self.conditioner.output_dim != 2 * n_t:
            raise ShapeError(
                f"conditioner outputs {self.conditioner.output_dim}, needs {2 * n_t}",
                tensor=self.conditioner.name,
            )
        if self.conditioner.input_dim <= len(self.pass_idx):
            raise ShapeError(
                "conditioner input must cover pass-through entries plus conditioning",
                tensor=self.conditioner.name,
            )

    @property
    def cond_dim(self) -> int:
        return self.conditioner.input_dim - len(self.pass_idx)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        init_mlp_params(self.conditioner, store, rng)

    def _shift_scale(self, passed, theta, store, tape):
        h = tape.concat([passed, theta])
        out = mlp_forward(self.conditioner, store, h, tape)
        shift, raw = _split_halves(tape, out, len(self.trans_idx))
        return shift, soft_clamp(raw, self.clamp, tape)

    def normalize(self, u, theta, store: ParamStore, tape: Tape):
        """Data-to-base direction; returns (u_next, logdet) where logdet is
        the layer's additive log-likelihood contribution."""
        passed = tape.take(u, self.pass_idx)
        trans = tape.take(u, self.trans_idx)
        shift, s = self._shift_scale(passed, theta, store, tape)
        moved = tape.mul(tape.sub(trans, shift), tape.exp(tape.neg(s)))
        u_next = tape.put(self.pass_idx, passed, self.trans_idx, moved, self.dim)
        logdet = tape.neg(tape.sum_last(s))
        _check_finite(u_next.value, self.name, "coupling output")
        return u_next, logdet

    def generate(self, u_next: np.ndarray, theta: np.ndarray, store: ParamStore) -> np.ndarray:
        """Base-to-data direction, exact inverse of ``normalize``."""
        passed = u_next[..., self.pass_idx]
        moved = u_next[..., self.trans_idx]
        h = np.concatenate([passed, theta], axis=-1)
        out = mlp_forward(self.conditioner, store, h)
        n_t = len(self.trans_idx)
        shift, raw = out[..., :n_t], out[..., n_t:]
        s = soft_clamp(raw, self.clamp)
        u = np.empty_like(u_next)
        u[..., self.pass_idx] = passed
        u[..., self.trans_idx] = moved * np.exp(s) + shift
        return u


@dataclass
class PermutationLayer:
    """Fixed reindexing of the state; volume preserving."""

    name: str
    dim: int
    perm: np.ndarray
    inv_perm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.intp)
        if sorted(self.perm.tolist()) != list(range(self.dim)):
            raise ShapeError(f"perm must be a permutation of 0..{self.dim - 1}", tensor=self.name)
        self.inv_perm = np.argsort(self.perm)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        pass

    def normalize(self, u, theta, store: ParamStore, tape: Tape):
        return tape.take(u, self.perm), None

    def generate(self, u_next: np.ndarray, theta: np.ndarray, store: ParamStore) -> np.ndarray:
        return u_next[..., self.inv_perm]


@dataclass
class FunnelLayer:
    """Surjective width reduction from ``in_dim`` to ``out_dim``.

    Entries at ``keep_idx`` stay on the bijective track through an
    affine map conditioned on the dropped entries; the dropped entries
    are scored by a Gaussian decoder conditioned on the reduced state.
    The layer's additive likelihood contribution is the decoder
    log-density minus the log-Jacobian of the kept map.
    """

    name: str
    in_dim: int
    out_dim: int
    keep_idx: np.ndarray
    kept_conditioner: MlpSpec
    decoder: MlpSpec
    clamp: float = 2.0
    log_std_bound: float = 7.0
    drop_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.keep_idx = np.asarray(self.keep_idx, dtype=np.intp)
        if not (0 < self.out_dim < self.in_dim):
            raise ShapeError(f"need 0 < out_dim < in_dim, got {self.out_dim} of {self.in_dim}", tensor=self.name)
        if self.keep_idx.shape != (self.out_dim,) or len(np.unique(self.keep_idx)) != self.out_dim:
            raise ShapeError(f"keep_idx must hold {self.out_dim} distinct entries", tensor=self.name)
        if self.keep_idx.min() < 0 or self.keep_idx.max() >= self.in_dim:
            raise ShapeError("keep_idx out of range", tensor=self.name)
        mask = np.ones(self.in_dim, dtype=bool)
        mask[self.keep_idx] = False
        self.drop_idx = np.where(mask)[0]
        n_drop = self.in_dim - self.out_dim
        if self.kept_conditioner.output_dim != 2 * self.out_dim:
            raise ShapeError(
                f"kept conditioner outputs {self.kept_conditioner.output_dim}, needs {2 * self.out_dim}",
                tensor=self.kept_conditioner.name,
            )
        if self.decoder.output_dim != 2 * n_drop:
            raise ShapeError(
                f"decoder outputs {self.decoder.output_dim}, needs {2 * n_drop}",
                tensor=self.decoder.name,
            )
        if self.log_std_bound <= 0:
            raise ValueError(f"{self.name}: log_std_bound must be positive")

    @property
    def cond_dim(self) -> int:
        return self.kept_conditioner.input_dim - len(self.drop_idx)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        init_mlp_params(self.kept_conditioner, store, rng)
        init_mlp_params(self.decoder, store, rng)

    def normalize(self, u, theta, store: ParamStore, tape: Tape):
        """Reduce width; returns (z, contribution)."""
        dropped = tape.take(u, self.drop_idx)
        kept = tape.take(u, self.keep_idx)
        h = tape.concat([dropped, theta])
        out = mlp_forward(self.kept_conditioner, store, h, tape)
        shift, raw = _split_halves(tape, out, self.out_dim)
        s = soft_clamp(raw, self.clamp, tape)
        z = tape.mul(tape.sub(kept, shift), tape.exp(tape.neg(s)))

        dec_out = mlp_forward(self.decoder, store, tape.concat([z, theta]), tape)
        n_drop = len(self.drop_idx)
        mean = tape.take(dec_out, np.arange(n_drop))
        log_std = tape.clip(
            tape.take(dec_out, np.arange(n_drop, 2 * n_drop)),
            -self.log_std_bound,
            self.log_std_bound,
        )
        dec_lp = tape.gaussian_logpdf(dropped, mean, log_std)
        contribution = tape.sub(dec_lp, tape.sum_last(s))
        _check_finite(z.value, self.name, "funnel output")
        _check_finite(contribution.value, self.name, "funnel contribution")
        return z, contribution

    def generate(self, z: np.ndarray, theta: np.ndarray, store: ParamStore, rng: np.random.Generator) -> np.ndarray:
        """Expand width: sample the dropped entries from the decoder, then
        invert the kept map conditioned on them."""
        dec_out = mlp_forward(self.decoder, store, np.concatenate([z, theta], axis=-1))
        n_drop = len(self.drop_idx)
        mean = dec_out[..., :n_drop]
        log_std = np.clip(dec_out[..., n_drop:], -self.log_std_bound, self.log_std_bound)
        dropped = mean + np.exp(log_std) * rng.standard_normal(mean.shape)

        out = mlp_forward(self.kept_conditioner, store, np.concatenate([dropped, theta], axis=-1))
        shift, raw = out[..., : self.out_dim], out[..., self.out_dim :]
        s = soft_clamp(raw, self.clamp)
        u = np.empty(z.shape[:-1] + (self.in_dim,), dtype=np.float64)
        u[..., self.drop_idx] = dropped
        u[..., self.keep_idx] = z * np.exp(s) + shift
        return u
