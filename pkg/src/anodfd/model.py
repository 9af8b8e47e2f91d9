"""AnoDFDNet: Siamese encoder, absolute feature differences, Transformer, skip decoder."""
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataIOError
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, MultiHeadSelfAttention, Parameter
from .tensor import Tensor

CONFIG_KEYS = ("input_h", "input_w", "input_c", "stages", "channels", "layers",
               "embed_dim", "heads", "mlp_ratio", "seed")


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 64
    input_w: int = 64
    input_c: int = 1
    stages: int = 3
    channels: tuple = (16, 32, 64)
    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self):
        f = 2 ** self.stages
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if len(self.channels) != self.stages:
            raise ConfigError(f"channels lists {len(self.channels)} entries for {self.stages} stages")
        if min(self.input_h, self.input_w, self.input_c) < 1 or min(self.channels) < 1:
            raise ConfigError("input extents and channel counts must be positive")
        if self.input_h % f or self.input_w % f:
            raise ConfigError(
                f"input size {self.input_h}x{self.input_w} is not divisible by 2^{self.stages}={f}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")

    @property
    def token_grid(self):
        f = 2 ** self.stages
        return self.input_h // f, self.input_w // f

    @property
    def num_tokens(self):
        h, w = self.token_grid
        return h * w

    def with_(self, **changes):
        return replace(self, **changes)

    def to_text(self):
        lines = []
        for key, value in asdict(self).items():
            if key == "channels":
                value = ",".join(str(c) for c in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"line {lineno}: unknown model config key {key!r}")
            try:
                values[key] = tuple(int(v) for v in value.split(",")) if key == "channels" else int(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} must be an integer, got {value!r}") from None
        return cls(**values)

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot read model config {path}: {exc}") from exc
        return cls.from_text(text)


class EncoderStage(Module):
    def __init__(self, c_in, c_out, rng, dtype):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=1, padding=1, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=2, padding=1, dtype=dtype)

    def __call__(self, x):
        return T.relu(self.conv2(T.relu(self.conv1(x))))


class TransformerLayer(Module):
    """Pre-norm block: z' = MSA(LN(z)) + z ; z_out = MLP(LN(z')) + z'."""

    def __init__(self, d, heads, mlp_ratio, rng, dtype):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiHeadSelfAttention(d, heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.mlp = MLP(d, mlp_ratio * d, rng, dtype)

    def __call__(self, z):
        z = T.add(self.attn(self.ln1(z)), z)
        return T.add(self.mlp(self.ln2(z)), z)


class TransformerStack(Module):
    def __init__(self, n_layers, d, heads, mlp_ratio, rng, dtype):
        self.layers = [TransformerLayer(d, heads, mlp_ratio, rng, dtype) for _ in range(n_layers)]

    def __len__(self):
        return len(self.layers)

    def __call__(self, z, keep=None):
        for layer in self.layers:
            z = layer(z)
            if keep is not None:
                keep.append(z)
        return z


class AnoDFDNet(Module):
    """Paired-image anomaly map network.

    Both images run through one encoder. Each stage's features are differenced
    with ``|F_cur - F_his|``; the deepest difference becomes ``h*w`` tokens,
    passes through ``layers`` Transformer blocks and is decoded with the
    shallower differences as skips. Output is a per-pixel sigmoid map.
    """

    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        dt = self.dtype
        chans = config.channels
        d = config.embed_dim

        c_prev = config.input_c
        self.encoder = []
        for c in chans:
            self.encoder.append(EncoderStage(c_prev, c, rng, dt))
            c_prev = c

        self.proj = Linear(chans[-1], d, rng, dt)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(config.num_tokens, d)).astype(dt))
        self.transformer = TransformerStack(config.layers, d, config.heads, config.mlp_ratio, rng, dt)

        # one up-level per stage; level i lands at the scale of stage S-1-i
        # and consumes that stage's difference when one exists
        self.decoder = []
        c_prev = d
        for i in range(config.stages):
            target = config.stages - 2 - i
            skip_c = chans[target] if target >= 0 else 0
            c_out = chans[max(target, 0)]
            self.decoder.append(Conv2d(c_prev + skip_c, c_out, 3, rng, stride=1, padding=1, dtype=dt))
            c_prev = c_out
        self.head = Conv2d(c_prev, 1, 1, rng, dtype=dt)
        self.assign_names()

    # -- building blocks ---------------------------------------------------

    def _as_input(self, image):
        x = image.data if isinstance(image, Tensor) else np.asarray(image)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.input_c, cfg.input_h, cfg.input_w):
            raise ConfigError(
                f"expected image(s) of shape (C,H,W)=({cfg.input_c},{cfg.input_h},{cfg.input_w}), got {x.shape}")
        return Tensor(x.astype(self.dtype, copy=False)), squeeze

    def encode(self, image):
        """Per-stage features of ``image`` (C,H,W) or (B,C,H,W), shallow to deep."""
        x, _ = self._as_input(image)
        feats = []
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        return feats

    @staticmethod
    def feature_difference(f_cur, f_his):
        if f_cur.shape != f_his.shape:
            raise ConfigError(f"feature shapes differ: {f_cur.shape} vs {f_his.shape}")
        return T.absolute(T.sub(f_cur, f_his))

    def tokenize_embed(self, diff):
        """(B, c, h, w) -> (B, h*w, d) tokens in row-major cell order, plus E_pos."""
        B, c, h, w = diff.shape
        if h * w != self.pos_embed.shape[0]:
            raise ConfigError(
                f"token count {h}*{w}={h * w} does not match position embedding rows {self.pos_embed.shape[0]}")
        tokens = T.reshape(T.transpose(diff, (0, 2, 3, 1)), (B, h * w, c))
        return T.add(self.proj(tokens), self.pos_embed)

    def decode(self, z, skips, keep=None):
        """Tokens (B, l, d) plus skip differences ordered deepest-to-shallowest -> (B, H, W)."""
        h, w = self.config.token_grid
        B, l, d = z.shape
        if l != h * w:
            raise ConfigError(f"decoder got {l} tokens, expected {h * w}")
        skips = list(skips)
        if len(skips) != self.config.stages - 1:
            raise ConfigError(f"decoder needs {self.config.stages - 1} skip maps, got {len(skips)}")
        x = T.transpose(T.reshape(z, (B, h, w, d)), (0, 3, 1, 2))
        for i, conv in enumerate(self.decoder):
            x = T.upsample2x(x)
            if i < len(skips):
                if skips[i].shape[2:] != x.shape[2:]:
                    raise ConfigError(f"skip {i} has spatial size {skips[i].shape[2:]}, decoder is at {x.shape[2:]}")
                x = T.concat([x, skips[i]], axis=1)
            x = T.relu(conv(x))
            if keep is not None:
                keep.append(x)
        out = T.sigmoid(self.head(x))
        return T.reshape(out, (B,) + out.shape[2:])

    # -- end to end --------------------------------------------------------

    def forward(self, cur, his, return_intermediates=False):
        """Anomaly map for one pair (C,H,W) -> (H,W) or a batch (B,C,H,W) -> (B,H,W)."""
        _, squeeze = self._as_input(cur)
        f_cur = self.encode(cur)
        f_his = self.encode(his)
        diffs = [self.feature_difference(a, b) for a, b in zip(f_cur, f_his)]
        z = self.tokenize_embed(diffs[-1])
        layer_outputs = []
        if self.transformer is not None and len(self.transformer):
            z = self.transformer(z, keep=layer_outputs)
        decoder_stages = []
        out = self.decode(z, diffs[-2::-1], keep=decoder_stages)
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        if return_intermediates:
            return out, {
                "f_cur": f_cur, "f_his": f_his, "diffs": diffs, "tokens": layer_outputs,
                "decoder": decoder_stages,
            }
        return out

    __call__ = forward

    def predict(self, cur, his, batch_size=8):
        """Tape-free anomaly maps for stacked pairs (N,C,H,W) -> (N,H,W) numpy."""
        cur, his = np.asarray(cur), np.asarray(his)
        outs = []
        with T.no_grad():
            for i in range(0, len(cur), batch_size):
                outs.append(self.forward(cur[i : i + batch_size], his[i : i + batch_size]).data)
        return np.concatenate(outs, axis=0)

    # -- persistence -------------------------------------------------------

    def state_arrays(self):
        return {p.name: p.data for p in self.parameters()}

    def shape_signature(self):
        return {p.name: p.shape for p in self.parameters()}

    def load_state_arrays(self, arrays):
        params = dict(self.named_parameters())
        stored = {k: v for k, v in arrays.items() if "/" not in k}
        expected = {k: p.shape for k, p in params.items()}
        got = {k: tuple(v.shape) for k, v in stored.items()}
        if expected != got:
            raise ConfigError(
                "checkpoint does not match model configuration\n"
                f"  model:      {_format_signature(expected)}\n"
                f"  checkpoint: {_format_signature(got)}")
        for name, p in params.items():
            p.data[...] = stored[name]

    def save(self, path, extra=None):
        arrays = dict(self.state_arrays())
        if extra:
            arrays.update(extra)
        save_checkpoint(path, arrays, width=self.dtype.itemsize)

    def load(self, path):
        arrays, _ = load_checkpoint(path)
        self.load_state_arrays(arrays)
        return arrays


def _format_signature(sig):
    return "; ".join(f"{k}{list(v)}" for k, v in sorted(sig.items()))
