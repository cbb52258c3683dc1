"""Toy diffusion transformer predicting flow velocity from latent tokens,
prompt tokens, and a timestep, with per-head attention capture, plus the
pixel/latent codec.

The network is a single stream of joint attention over [text; image] tokens
with modality embeddings. Timestep conditioning enters through per-block
adaptive scale/shift/gate projections that are zero-initialized, and the
output projection starts at exactly zero, so a fresh model predicts zero
velocity everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

PAD_TOKEN = "<pad>"
VOCAB = (PAD_TOKEN, "face", "wound", "bruise", "blood", "glasses", "hat", "smile")
PAD_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    width: int = 128          # token width d
    heads: int = 4            # attention heads per block
    blocks: int = 6           # transformer blocks
    max_prompt: int = 8       # text sequence length l
    vocab: tuple[str, ...] = VOCAB
    codec: str = "identity"   # "identity" | "learned"
    latent_channels: int = 12  # only used by the learned codec

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        if self.codec == "learned":
            g = self.image_size // self.patch
            return (g, g, self.latent_channels)
        return (self.image_size, self.image_size, self.channels)

    @property
    def latent_patch(self) -> int:
        # the learned codec already tokenizes spatially; identity mode patches pixels
        return 1 if self.codec == "learned" else self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        h, w, c = self.latent_shape
        return self.latent_patch * self.latent_patch * c


@dataclass(frozen=True)
class PromptTokens:
    """Token ids over the attribute vocabulary, padded to the configured length."""

    ids: tuple[int, ...]
    length: int

    def words(self, config: ModelConfig) -> tuple[str, ...]:
        return tuple(config.vocab[i] for i in self.ids[: self.length])


def encode_prompt(text, config: ModelConfig) -> PromptTokens:
    """Encode 'face,wound' or a word sequence into padded ids."""
    words = [w.strip() for w in text.split(",")] if isinstance(text, str) else list(text)
    words = [w for w in words if w]
    index = {w: i for i, w in enumerate(config.vocab)}
    try:
        ids = [index[w] for w in words]
    except KeyError as e:
        raise ValueError(f"unknown prompt token {e.args[0]!r}; vocabulary is {config.vocab}") from None
    if len(ids) > config.max_prompt:
        raise ValueError(f"prompt has {len(ids)} tokens, max is {config.max_prompt}")
    padded = ids + [PAD_ID] * (config.max_prompt - len(ids))
    return PromptTokens(ids=tuple(padded), length=len(ids))


def decode_prompt(prompt: PromptTokens, config: ModelConfig) -> str:
    return ",".join(prompt.words(config))


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """(B,) timesteps in [0,1] -> (B, dim) sin/cos features."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float32))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half, dtype=np.float32) / half)
    ang = t[:, None] * freqs[None, :] * 2 * np.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class VelocityModel:
    """v_theta(z_t, t, c) over a latent token grid.

    Parameters live in a flat name->Tensor dict so the optimizer, checkpoints,
    and fine-tuning can treat the model generically.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "VelocityModel":
        rng = np.random.default_rng(seed)
        d = config.width
        p: dict[str, Tensor] = {}

        def w(name, *shape, std=0.02):
            p[name] = Tensor(rng.standard_normal(shape).astype(np.float32) * std, requires_grad=True)

        def zeros(name, *shape):
            p[name] = Tensor(np.zeros(shape, np.float32), requires_grad=True)

        w("tok_embed", len(config.vocab), d)
        w("patch_embed.w", config.patch_dim, d)
        zeros("patch_embed.b", d)
        w("pos_img", config.n_tokens, d)
        w("pos_txt", config.max_prompt, d)
        w("mod_img", d)
        w("mod_txt", d)
        w("time.w1", d, d)
        zeros("time.b1", d)
        w("time.w2", d, d)
        zeros("time.b2", d)
        for b in range(config.blocks):
            pre = f"blk{b}."
            zeros(pre + "mod.w", d, 6 * d)
            zeros(pre + "mod.b", 6 * d)
            w(pre + "attn.wq", d, d)
            zeros(pre + "attn.bq", d)
            w(pre + "attn.wk", d, d)
            zeros(pre + "attn.bk", d)
            w(pre + "attn.wv", d, d)
            zeros(pre + "attn.bv", d)
            w(pre + "attn.wo", d, d)
            zeros(pre + "attn.bo", d)
            w(pre + "mlp.w1", d, 4 * d)
            zeros(pre + "mlp.b1", 4 * d)
            w(pre + "mlp.w2", 4 * d, d)
            zeros(pre + "mlp.b2", d)
        zeros("final.mod.w", d, 2 * d)
        zeros("final.mod.b", 2 * d)
        zeros("head.w", d, config.patch_dim)
        zeros("head.b", config.patch_dim)
        return cls(config, p)

    def clone(self) -> "VelocityModel":
        return VelocityModel(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    # -- forward ------------------------------------------------------------

    def _patchify(self, z: Tensor) -> Tensor:
        h, w_, c = self.config.latent_shape
        pp = self.config.latent_patch
        g = self.config.grid
        x = tc.reshape(z, (-1, g, pp, g, pp, c))
        x = tc.transpose(x, (0, 1, 3, 2, 4, 5))
        return tc.reshape(x, (-1, self.config.n_tokens, self.config.patch_dim))

    def _unpatchify(self, x: Tensor) -> Tensor:
        h, w_, c = self.config.latent_shape
        pp = self.config.latent_patch
        g = self.config.grid
        x = tc.reshape(x, (-1, g, g, pp, pp, c))
        x = tc.transpose(x, (0, 1, 3, 2, 4, 5))
        return tc.reshape(x, (-1, h, w_, c))

    def forward(self, z_t, prompt, t, capture: bool = False):
        """Graph-building forward pass.

        z_t: (h, w, c) or (B, h, w, c) array/Tensor; prompt: PromptTokens or
        (B, l) id array; t: scalar or (B,) in [0, 1]. Returns (velocity Tensor
        shaped like z_t with batch axis, capture array or None). Capture is a
        numpy (blocks, heads, n_img, l + n_img) copy of the softmaxed joint
        attention rows for image queries (batch size 1 only).
        """
        cfg = self.config
        p = self.params
        z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z.ndim == 3:
            z = tc.reshape(z, (1,) + z.shape)
        if z.shape[1:] != cfg.latent_shape:
            raise ValueError(f"forward: latent shape {z.shape[1:]} does not match config {cfg.latent_shape}")
        batch = z.shape[0]

        if isinstance(prompt, PromptTokens):
            ids = np.asarray(prompt.ids)[None, :].repeat(batch, axis=0)
        else:
            ids = np.asarray(prompt)
            if ids.ndim == 1:
                ids = ids[None, :].repeat(batch, axis=0)
        if ids.shape != (batch, cfg.max_prompt):
            raise ValueError(f"forward: prompt ids shape {ids.shape}, expected {(batch, cfg.max_prompt)}")
        if ids.min() < 0 or ids.max() >= len(cfg.vocab):
            raise ValueError("forward: prompt id outside vocabulary")

        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float32), (batch,)).copy()
        if t_arr.min() < 0.0 or t_arr.max() > 1.0:
            raise ValueError(f"forward: t must lie in [0,1], got {t_arr}")
        if capture and batch != 1:
            raise ValueError("forward: attention capture supports batch size 1")

        l, n_img = cfg.max_prompt, cfg.n_tokens
        n_all = l + n_img
        dh = cfg.width // cfg.heads

        txt = tc.add(tc.add(tc.embedding(p["tok_embed"], ids), p["pos_txt"]), p["mod_txt"])
        img = tc.add(tc.add(tc.matmul(self._patchify(z), p["patch_embed.w"]), p["patch_embed.b"]), p["pos_img"])
        img = tc.add(img, p["mod_img"])
        x = tc.concat([txt, img], axis=1)

        sin = Tensor(sinusoidal_embedding(t_arr, cfg.width))
        temb = tc.add(tc.matmul(tc.gelu(tc.add(tc.matmul(sin, p["time.w1"]), p["time.b1"])), p["time.w2"]), p["time.b2"])
        tact = tc.gelu(temb)

        # additive key mask: padded text positions never receive attention
        key_mask = np.zeros((batch, 1, 1, n_all), np.float32)
        key_mask[:, 0, 0, :l][ids == PAD_ID] = -1e9
        key_mask = Tensor(key_mask)

        captured = np.zeros((cfg.blocks, cfg.heads, n_img, n_all), np.float32) if capture else None

        def heads(y: Tensor) -> Tensor:
            y = tc.reshape(y, (batch, n_all, cfg.heads, dh))
            return tc.transpose(y, (0, 2, 1, 3))

        for b in range(cfg.blocks):
            pre = f"blk{b}."
            mod = tc.add(tc.matmul(tact, p[pre + "mod.w"]), p[pre + "mod.b"])
            pieces = [tc.reshape(tc.narrow(mod, 1, i * cfg.width, cfg.width), (batch, 1, cfg.width)) for i in range(6)]
            shift1, scale1, gate1, shift2, scale2, gate2 = pieces

            h = tc.add(tc.mul(tc.layernorm(x), tc.add(scale1, 1.0)), shift1)
            q = heads(tc.add(tc.matmul(h, p[pre + "attn.wq"]), p[pre + "attn.bq"]))
            k = heads(tc.add(tc.matmul(h, p[pre + "attn.wk"]), p[pre + "attn.bk"]))
            v = heads(tc.add(tc.matmul(h, p[pre + "attn.wv"]), p[pre + "attn.bv"]))
            scores = tc.mul(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            weights = tc.softmax(tc.add(scores, key_mask), axis=-1)
            if capture:
                captured[b] = weights.data[0, :, l:, :]
            att = tc.matmul(weights, v)
            att = tc.reshape(tc.transpose(att, (0, 2, 1, 3)), (batch, n_all, cfg.width))
            att = tc.add(tc.matmul(att, p[pre + "attn.wo"]), p[pre + "attn.bo"])
            x = tc.add(x, tc.mul(gate1, att))

            h2 = tc.add(tc.mul(tc.layernorm(x), tc.add(scale2, 1.0)), shift2)
            m = tc.matmul(tc.gelu(tc.add(tc.matmul(h2, p[pre + "mlp.w1"]), p[pre + "mlp.b1"])), p[pre + "mlp.w2"])
            m = tc.add(m, p[pre + "mlp.b2"])
            x = tc.add(x, tc.mul(gate2, m))

        fmod = tc.add(tc.matmul(tact, p["final.mod.w"]), p["final.mod.b"])
        fshift = tc.reshape(tc.narrow(fmod, 1, 0, cfg.width), (batch, 1, cfg.width))
        fscale = tc.reshape(tc.narrow(fmod, 1, cfg.width, cfg.width), (batch, 1, cfg.width))
        h = tc.add(tc.mul(tc.layernorm(x), tc.add(fscale, 1.0)), fshift)
        out = tc.add(tc.matmul(tc.narrow(h, 1, l, n_img), p["head.w"]), p["head.b"])
        return self._unpatchify(out), captured

    def velocity(self, z_t: np.ndarray, prompt, t: float, capture: bool = False,
                 guidance_scale: float = 1.0):
        """Inference-only velocity; returns (array shaped like z_t, capture)."""
        squeeze = np.asarray(z_t).ndim == 3
        with tc.no_grad():
            out, cap = self.forward(z_t, prompt, t, capture=capture)
            v = out.data
            if guidance_scale != 1.0:
                null = PromptTokens(ids=(PAD_ID,) * self.config.max_prompt, length=0)
                vu = self.forward(z_t, null, t)[0].data
                v = vu + np.float32(guidance_scale) * (v - vu)
        return (v[0] if squeeze else v), cap

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        meta = {"kind": "velocity_model", "config": _config_to_dict(self.config)}
        tensors = dict(self.params)
        tensors["__meta__"] = _json_to_f32(meta)
        tc.save_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> "VelocityModel":
        tensors = tc.load_tensors(path)
        meta = _json_from_f32(tensors.pop("__meta__"))
        config = _config_from_dict(meta["config"])
        params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return cls(config, params)


def _json_to_f32(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 4)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def _json_from_f32(arr: np.ndarray):
    return json.loads(arr.astype("<f4").tobytes().decode("utf-8").rstrip())


def _config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["vocab"] = list(config.vocab)
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["vocab"] = tuple(d["vocab"])
    return ModelConfig(**d)


# ---------------------------------------------------------------------------
# latent codec


class LatentCodec:
    """E/D pair between images (H, W, 3 floats in [0,1]) and the latent grid.

    Identity mode is a lossless pass-through (pixel-space flow). Learned mode
    is a linear patch autoencoder trained on sprites.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.mode = config.codec
        if self.mode == "learned" and params is None:
            rng = np.random.default_rng(0)
            pd = config.patch * config.patch * config.channels
            params = {
                "enc.w": Tensor(rng.standard_normal((pd, config.latent_channels)).astype(np.float32) * 0.1, requires_grad=True),
                "enc.b": Tensor(np.zeros(config.latent_channels, np.float32), requires_grad=True),
                "dec.w": Tensor(rng.standard_normal((config.latent_channels, pd)).astype(np.float32) * 0.1, requires_grad=True),
                "dec.b": Tensor(np.zeros(pd, np.float32), requires_grad=True),
            }
        self.params = params or {}

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float32)
        want = (self.config.image_size, self.config.image_size, self.config.channels)
        if image.shape != want:
            raise ValueError(f"codec: image shape {image.shape}, expected {want}")
        return image

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = self._check_image(image)
        if self.mode == "identity":
            return image.copy()
        g = self.config.image_size // self.config.patch
        pp = self.config.patch
        x = image.reshape(g, pp, g, pp, self.config.channels).transpose(0, 2, 1, 3, 4)
        x = x.reshape(g * g, -1)
        z = x @ self.params["enc.w"].data + self.params["enc.b"].data
        return z.reshape(self.config.latent_shape)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float32)
        if latent.shape != self.config.latent_shape:
            raise ValueError(f"codec: latent shape {latent.shape}, expected {self.config.latent_shape}")
        if self.mode == "identity":
            return latent.copy()
        g = self.config.image_size // self.config.patch
        pp = self.config.patch
        x = latent.reshape(g * g, self.config.latent_channels)
        y = x @ self.params["dec.w"].data + self.params["dec.b"].data
        y = y.reshape(g, g, pp, pp, self.config.channels).transpose(0, 2, 1, 3, 4)
        return np.clip(y.reshape(self.config.image_size, self.config.image_size, self.config.channels), 0.0, 1.0)

    def train(self, images: np.ndarray, steps: int = 400, lr: float = 1e-2, seed: int = 0) -> list[float]:
        """Fit the learned autoencoder on (N, H, W, 3) sprites; returns the loss curve."""
        if self.mode != "learned":
            raise ValueError("codec.train: identity codec has nothing to train")
        rng = np.random.default_rng(seed)
        g = self.config.image_size // self.config.patch
        pp = self.config.patch
        n = images.shape[0]
        patches = (
            np.asarray(images, np.float32)
            .reshape(n, g, pp, g, pp, self.config.channels)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n * g * g, -1)
        )
        state = tc.AdamState(lr=lr)
        curve = []
        for _ in range(steps):
            idx = rng.integers(0, patches.shape[0], size=256)
            batch = Tensor(patches[idx])
            z = tc.add(tc.matmul(batch, self.params["enc.w"]), self.params["enc.b"])
            rec = tc.add(tc.matmul(z, self.params["dec.w"]), self.params["dec.b"])
            loss = tc.mse(rec, batch)
            tc.zero_grads(self.params)
            tc.backward(loss)
            tc.adam_step(self.params, state)
            curve.append(loss.item())
        return curve
