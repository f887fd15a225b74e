"""Masked-autoencoder channel model over 3D CSI patches."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..numcore import tensor as T
from ..numcore.tensor import Tensor
from .masking import MaskSpec, sample_mask
from .patching import PatchSpec, patchify, rms_normalize, token_coords, unpatchify
from .posenc import stf_pos_encode

SCENE_FEATURES = 4  # |g|, tau, theta, nu per path


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 96
    encoder_depth: int = 4
    decoder_dim: int = 48
    decoder_depth: int = 2
    n_heads: int = 6
    mlp_ratio: int = 2
    patch: PatchSpec = field(default_factory=PatchSpec)
    scene_token_enabled: bool = False
    scene_top_k: int = 4
    # divisors for (|g|, tau_s, aoa_rad, doppler_hz) scene features
    scene_scales: tuple[float, float, float, float] = (1.0, 1e-6, math.pi / 2, 200.0)

    def __post_init__(self):
        for name in ("embed_dim", "decoder_dim"):
            d = getattr(self, name)
            if d % self.n_heads or d % 3:
                raise ValueError(f"{name}={d} must be divisible by n_heads={self.n_heads} and by 3")
        for name in ("encoder_depth", "decoder_depth", "n_heads", "mlp_ratio", "scene_top_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.scene_scales) != SCENE_FEATURES or any(s <= 0 for s in self.scene_scales):
            raise ValueError("scene_scales must be 4 positive numbers")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene_scales"] = list(self.scene_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"{unknown[0]}: unknown model config field")
        if "patch" in d and not isinstance(d["patch"], PatchSpec):
            d["patch"] = PatchSpec(**d["patch"])
        if "scene_scales" in d:
            d["scene_scales"] = tuple(float(s) for s in d["scene_scales"])
        return cls(**d)


# -- parameter registry ------------------------------------------------------

def _linear_shapes(prefix: str, n_in: int, n_out: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.weight", (n_in, n_out)), (f"{prefix}.bias", (n_out,))]


def _norm_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.weight", (d,)), (f"{prefix}.bias", (d,))]


def _block_shapes(prefix: str, d: int, mlp_ratio: int):
    shapes = _norm_shapes(f"{prefix}.norm1", d)
    for proj in ("q", "k", "v", "proj"):
        shapes += _linear_shapes(f"{prefix}.attn.{proj}", d, d)
    shapes += _norm_shapes(f"{prefix}.norm2", d)
    shapes += _linear_shapes(f"{prefix}.mlp.fc1", d, d * mlp_ratio)
    shapes += _linear_shapes(f"{prefix}.mlp.fc2", d * mlp_ratio, d)
    return shapes


def scene_param_shapes(cfg: ModelConfig):
    n_in = SCENE_FEATURES * cfg.scene_top_k
    return _linear_shapes("scene.fc1", n_in, cfg.decoder_dim) + _linear_shapes("scene.fc2", cfg.decoder_dim, cfg.decoder_dim)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    w = cfg.patch.width
    shapes = _linear_shapes("patch_embed", w, cfg.embed_dim)
    for i in range(cfg.encoder_depth):
        shapes += _block_shapes(f"encoder.blocks.{i}", cfg.embed_dim, cfg.mlp_ratio)
    shapes += _norm_shapes("encoder.norm", cfg.embed_dim)
    shapes += _linear_shapes("decoder.embed", cfg.embed_dim, cfg.decoder_dim)
    shapes.append(("decoder.mask_token", (cfg.decoder_dim,)))
    for i in range(cfg.decoder_depth):
        shapes += _block_shapes(f"decoder.blocks.{i}", cfg.decoder_dim, cfg.mlp_ratio)
    shapes += _norm_shapes("decoder.norm", cfg.decoder_dim)
    shapes += _linear_shapes("decoder.head", cfg.decoder_dim, w)
    if cfg.scene_token_enabled:
        shapes += scene_param_shapes(cfg)
    return shapes


def init_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".bias"):
        return np.zeros(shape)
    if "norm" in name.split(".")[-2] and name.endswith(".weight"):
        return np.ones(shape)
    if name.endswith("mask_token"):
        return 0.02 * rng.standard_normal(shape)
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, shapes=None) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg) if shapes is None else shapes
    return {
        name: Tensor(init_param(name, shape, rng).astype(dtype), requires_grad=True, name=name)
        for name, shape in shapes
    }


# -- model -------------------------------------------------------------------

class WiFoModel:
    """Encoder over visible patch tokens, decoder over the full token grid."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)
        expected = dict(param_shapes(config))
        missing = sorted(set(expected) - set(self.params))
        extra = sorted(set(self.params) - set(expected))
        if missing or extra:
            raise ValueError(f"parameter/config mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, config expects {shape}")
        self.trainable = {name: True for name in self.params}
        self.provenance: dict = {}
        self._pe_cache: dict = {}

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def enable_scene_token(self, seed: int = 0) -> None:
        """Add freshly initialized scene-token parameters to a model without them."""
        if self.config.scene_token_enabled:
            return
        from dataclasses import replace

        self.config = replace(self.config, scene_token_enabled=True)
        new = init_params(self.config, seed, self.dtype, shapes=scene_param_shapes(self.config))
        self.params.update(new)
        self.trainable.update({name: True for name in new})

    # building blocks

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return T.add(T.matmul(x, self._p(f"{prefix}.weight")), self._p(f"{prefix}.bias"))

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self._p(f"{prefix}.weight"), self._p(f"{prefix}.bias"))

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        b, n, d = x.shape
        h = self.config.n_heads
        dh = d // h

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q = heads(T.scale(self._linear(x, f"{prefix}.q"), 1.0 / math.sqrt(dh)))
        k = heads(self._linear(x, f"{prefix}.k"))
        v = heads(self._linear(x, f"{prefix}.v"))
        att = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))))
        o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        return self._linear(o, f"{prefix}.proj")

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        x = T.add(x, self._attention(self._norm(x, f"{prefix}.norm1"), f"{prefix}.attn"))
        hdn = T.gelu(self._linear(self._norm(x, f"{prefix}.norm2"), f"{prefix}.mlp.fc1"))
        return T.add(x, self._linear(hdn, f"{prefix}.mlp.fc2"))

    def pos_encoding(self, grid_dims, dim: int) -> np.ndarray:
        key = (tuple(grid_dims), dim)
        if key not in self._pe_cache:
            pe = stf_pos_encode(token_coords(grid_dims), grid_dims, dim)
            self._pe_cache[key] = pe.astype(self.dtype)
        return self._pe_cache[key]

    # forward pieces

    def encode_visible(self, patches: np.ndarray, mask: MaskSpec, grid_dims) -> Tensor:
        """Embed, position-code and encode the visible tokens only.

        ``patches`` is [B, n_tokens, width]; the result is [B, |visible|, embed_dim].
        """
        patches = np.asarray(patches, dtype=self.dtype)
        if patches.ndim == 2:
            patches = patches[None]
        b, n, w = patches.shape
        if w != self.config.patch.width:
            raise ValueError(f"token width {w} does not match patch width {self.config.patch.width}")
        if n != mask.n_tokens:
            raise ValueError(f"mask covers {mask.n_tokens} tokens, input has {n}")
        vis = mask.visible
        if vis.size == 0:
            raise ValueError("mask leaves no visible tokens")
        x = self._linear(Tensor(patches[:, vis]), "patch_embed")
        x = T.add(x, Tensor(self.pos_encoding(grid_dims, self.config.embed_dim)[vis]))
        for i in range(self.config.encoder_depth):
            x = self._block(x, f"encoder.blocks.{i}")
        return self._norm(x, "encoder.norm")

    def decode_full(self, latents: Tensor, mask: MaskSpec, grid_dims, scene_token: Tensor | None = None) -> Tensor:
        """Reconstruct all patch rows [B, n_tokens, width] from visible latents."""
        cfg = self.config
        if cfg.scene_token_enabled and scene_token is None:
            raise ValueError("scene token enabled in config but not supplied")
        if not cfg.scene_token_enabled and scene_token is not None:
            raise ValueError("scene token supplied but disabled in config")
        b, nv, _ = latents.shape
        vis, masked = mask.visible, mask.masked
        if nv != vis.size:
            raise ValueError(f"{nv} latents for {vis.size} visible tokens")
        dd = cfg.decoder_dim
        y = self._linear(latents, "decoder.embed")
        fill = Tensor(np.zeros((b, masked.size, dd), dtype=self.dtype))
        mtok = T.add(fill, T.reshape(self._p("decoder.mask_token"), (1, 1, dd)))
        seq = T.concat([y, mtok], axis=1)
        restore = np.argsort(np.concatenate([vis, masked]), kind="stable")
        seq = T.gather(seq, restore, axis=1)
        seq = T.add(seq, Tensor(self.pos_encoding(grid_dims, dd)))
        n = mask.n_tokens
        if scene_token is not None:
            seq = T.concat([seq, T.reshape(scene_token, (b, 1, dd))], axis=1)
        for i in range(cfg.decoder_depth):
            seq = self._block(seq, f"decoder.blocks.{i}")
        out = self._linear(self._norm(seq, "decoder.norm"), "decoder.head")
        if scene_token is not None:
            out = T.gather(out, np.arange(n), axis=1)
        return out

    def scene_features(self, scenes: np.ndarray) -> np.ndarray:
        """Top-k path features [B, 4 * top_k] from raw scene arrays [B, P, 5]."""
        scenes = np.asarray(scenes, dtype=np.float64)
        if scenes.ndim == 2:
            scenes = scenes[None]
        k = self.config.scene_top_k
        scales = np.asarray(self.config.scene_scales)
        out = np.zeros((scenes.shape[0], k, SCENE_FEATURES))
        for i, paths in enumerate(scenes):
            if paths.shape[0] == 0:
                raise ValueError("scene has no paths")
            mag = np.hypot(paths[:, 0], paths[:, 1])
            feats = np.stack([mag, paths[:, 2], paths[:, 3], paths[:, 4]], axis=1)
            # strongest first; remaining fields break ties so input order never matters
            order = np.lexsort((feats[:, 3], feats[:, 2], feats[:, 1], -feats[:, 0]))
            top = feats[order[:k]] / scales
            out[i, : top.shape[0]] = top
        return out.reshape(scenes.shape[0], -1).astype(self.dtype)

    def scene_token(self, scenes: np.ndarray) -> Tensor:
        if not self.config.scene_token_enabled:
            raise ValueError("scene token disabled in config")
        x = Tensor(self.scene_features(scenes))
        return self._linear(T.gelu(self._linear(x, "scene.fc1")), "scene.fc2")

    def forward(self, patches: np.ndarray, mask: MaskSpec, grid_dims, scenes: np.ndarray | None = None) -> Tensor:
        latents = self.encode_visible(patches, mask, grid_dims)
        token = self.scene_token(scenes) if scenes is not None else None
        return self.decode_full(latents, mask, grid_dims, token)

    # inference

    def predict(self, values: np.ndarray, kind: str, horizon: int, scenes: np.ndarray | None = None) -> np.ndarray:
        """Fill the last ``horizon`` snapshots (time) or subcarriers (frequency).

        Only the known region of ``values`` is read; it is returned unchanged.
        """
        values = np.asarray(values)
        single = values.ndim == 3
        batch = values[None] if single else values
        shape = batch.shape[1:]
        unknown = task_region(shape, kind, horizon)
        grid = self.config.patch.grid_dims(shape)
        mask = task_mask(kind, horizon, shape, self.config.patch)
        known_only = np.where(unknown, 0, batch)
        normed, rms = rms_normalize(known_only, ~unknown)
        patches = patchify(normed.astype(np.complex64 if self.dtype == np.float32 else np.complex128), self.config.patch)
        if scenes is not None and single:
            scenes = np.asarray(scenes)[None]
        with T.no_grad():
            recon = self.forward(patches, mask, grid, scenes if self.config.scene_token_enabled else None)
        filled = unpatchify(recon.data, self.config.patch, shape) * rms
        out = batch.copy()
        out[:, unknown] = filled[:, unknown].astype(out.dtype)
        return out[0] if single else out

    def param_count(self) -> tuple[int, int]:
        total = sum(p.data.size for p in self.params.values())
        trainable = sum(p.data.size for n, p in self.params.items() if self.trainable.get(n, False))
        return trainable, total


def task_region(shape, kind: str, horizon: int) -> np.ndarray:
    """Boolean (T, S, F) mask of the entries a prediction task must fill."""
    T_, S, F = shape
    axis, size = {"time": (0, T_), "frequency": (2, F)}.get(kind, (None, None))
    if axis is None:
        raise ValueError(f"task kind must be 'time' or 'frequency', got {kind!r}")
    if not 1 <= horizon < size:
        raise ValueError(f"{kind} horizon {horizon} outside [1, {size})")
    region = np.zeros(shape, dtype=bool)
    sl = [slice(None)] * 3
    sl[axis] = slice(size - horizon, size)
    region[tuple(sl)] = True
    return region


def task_mask(kind: str, horizon: int, shape, patch: PatchSpec) -> MaskSpec:
    """Deterministic token mask for a raw-unit prediction horizon."""
    grid = patch.grid_dims(shape)
    extent = patch.pt if kind == "time" else patch.pf
    if horizon % extent:
        raise ValueError(f"{kind} horizon {horizon} is not a multiple of patch extent {extent}")
    return sample_mask(kind, int(np.prod(grid)), grid, horizon // extent)


def mae_loss(reconstruction: Tensor, target: np.ndarray, mask: MaskSpec) -> Tensor:
    """Mean squared error over the masked token rows only."""
    target = np.asarray(target)
    if reconstruction.shape != target.shape:
        raise ValueError(f"reconstruction {reconstruction.shape} and target {target.shape} differ")
    if mask.masked.size == 0:
        raise ValueError("mask is empty")
    axis = reconstruction.ndim - 2
    tgt = Tensor(np.take(target, mask.masked, axis=axis).astype(reconstruction.dtype))
    return T.mse(T.gather(reconstruction, mask.masked, axis=axis), tgt)


def predict(values: np.ndarray, kind: str, horizon: int, model: WiFoModel, scenes=None) -> np.ndarray:
    return model.predict(values, kind, horizon, scenes)
