"""Shared vision-language architecture used by both generator stages.

Visual input is a pair of per-region token sets (current and prior scan).
A residual MLP fuses each aligned region pair into a joint row, a learned
linear bridge lifts joint rows to model width, and an encoder-decoder
transformer with learned position and segment embeddings generates text
autoregressively.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant, parameter
from .errors import ContractError
from .textproc import TokenSequence, Segment, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    N: int = 8                 # anatomical region slots per scan
    d_visual: int = 16         # per-region feature width
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 256
    max_len: int = 160
    mlp_hidden: int = 64       # hidden width of the scan-pair fusion MLP
    ffn_hidden: int = 256      # transformer feed-forward width
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def desk_scale(vocab_size: int = 256, **overrides) -> ModelConfig:
    """Small configuration every test trains in seconds."""
    return ModelConfig(vocab_size=vocab_size, **overrides)


def full_scale() -> ModelConfig:
    """Reference configuration at published scale (documented, not run in CI).

    The vocabulary size is not published; 35k reproduces the reported
    total trainable-parameter count under this architecture.
    """
    return ModelConfig(
        N=36,
        d_visual=1024,
        d_model=512,
        n_layers=3,
        n_heads=8,
        vocab_size=35000,
        max_len=512,
        mlp_hidden=2048,
        ffn_hidden=2048,
    )


def config_digest(config: ModelConfig, vocab: Vocabulary | None = None) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    if vocab is not None:
        payload += "\n" + "\n".join(vocab.id_to_token)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Parameters


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Seeded initialization: uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    dm, dv, h = config.d_model, config.d_visual, config.mlp_hidden
    f = config.ffn_hidden
    params: dict[str, np.ndarray] = {}

    def linear(prefix: str, fan_in: int, fan_out: int):
        params[f"{prefix}.w"] = _uniform(rng, fan_in, (fan_in, fan_out), dt)
        params[f"{prefix}.b"] = np.zeros(fan_out, dtype=dt)

    def layernorm(prefix: str):
        params[f"{prefix}.g"] = np.ones(dm, dtype=dt)
        params[f"{prefix}.b"] = np.zeros(dm, dtype=dt)

    linear("fuse.fc1", 2 * dv, h)
    linear("fuse.fc2", h, 2 * dv)
    linear("bridge", 2 * dv, dm)
    params["emb.token"] = _uniform(rng, dm, (config.vocab_size, dm), dt)
    params["emb.pos"] = _uniform(rng, dm, (config.max_len, dm), dt)
    params["emb.seg"] = _uniform(rng, dm, (2, dm), dt)
    for i in range(config.n_layers):
        for proj in ("q", "k", "v", "o"):
            linear(f"enc.{i}.attn.{proj}", dm, dm)
        layernorm(f"enc.{i}.ln1")
        linear(f"enc.{i}.ffn.fc1", dm, f)
        linear(f"enc.{i}.ffn.fc2", f, dm)
        layernorm(f"enc.{i}.ln2")
    for i in range(config.n_layers):
        for block in ("self", "cross"):
            for proj in ("q", "k", "v", "o"):
                linear(f"dec.{i}.{block}.{proj}", dm, dm)
        layernorm(f"dec.{i}.ln1")
        layernorm(f"dec.{i}.ln2")
        linear(f"dec.{i}.ffn.fc1", dm, f)
        linear(f"dec.{i}.ffn.fc2", f, dm)
        layernorm(f"dec.{i}.ln3")
    linear("out", dm, config.vocab_size)
    return {name: parameter(arr, name=name) for name, arr in params.items()}


def count_parameters(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


def parameter_count_formula(config: ModelConfig) -> int:
    """Closed-form trainable-parameter count of init_params(config)."""
    dm, dv, h, f = config.d_model, config.d_visual, config.mlp_hidden, config.ffn_hidden
    v, ln = config.vocab_size, config.max_len
    fuse = (2 * dv) * h + h + h * (2 * dv) + 2 * dv
    bridge = (2 * dv) * dm + dm
    emb = v * dm + ln * dm + 2 * dm
    attn = 4 * (dm * dm + dm)
    ffn = dm * f + f + f * dm + dm
    norm = 2 * dm
    enc = config.n_layers * (attn + ffn + 2 * norm)
    dec = config.n_layers * (2 * attn + ffn + 3 * norm)
    out = dm * v + v
    return fuse + bridge + emb + enc + dec + out


# ---------------------------------------------------------------------------
# Forward pieces


def _as_batched(tokens: np.ndarray, config: ModelConfig, what: str) -> np.ndarray:
    arr = np.asarray(tokens, dtype=config.np_dtype)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-2:] != (config.N, config.d_visual):
        raise ContractError(
            f"project_scan_pair: {what} must be (B, {config.N}, {config.d_visual}), got {arr.shape}"
        )
    return arr


def project_scan_pair(
    current: np.ndarray, prior: np.ndarray, params: dict[str, Tensor], config: ModelConfig
) -> Tensor:
    """Residual fusion of aligned region pairs.

    Per region n: out_n = MLP([cur_n, prior_n]) + [cur_n, prior_n], so the
    joint row keeps the raw pair and the MLP learns a refinement. Output is
    (B, N, 2*d_visual).
    """
    cur = _as_batched(current, config, "current tokens")
    pri = _as_batched(prior, config, "prior tokens")
    if cur.shape != pri.shape:
        raise ContractError(
            f"project_scan_pair: current {cur.shape} and prior {pri.shape} differ"
        )
    paired = constant(np.concatenate([cur, pri], axis=-1))
    hidden = ad.relu(ad.add(ad.matmul(paired, params["fuse.fc1.w"]), params["fuse.fc1.b"]))
    refined = ad.add(ad.matmul(hidden, params["fuse.fc2.w"]), params["fuse.fc2.b"])
    return ad.add(refined, paired)


@dataclass
class EncoderInput:
    embedded: Tensor          # (B, N + Tt, d_model)
    key_valid: np.ndarray     # (B, N + Tt) bool, False on padded text rows
    truncated: bool


def assemble_joint_input(
    joint: Tensor,
    text_ids: np.ndarray,
    text_valid: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
) -> EncoderInput:
    """Bridge joint visual rows to model width and splice in text embeddings.

    Vision rows occupy positions 0..N-1, text continues from N; each row adds
    its position embedding plus a segment embedding marking vision vs. text.
    Overlong text is truncated from the tail (vision rows are never dropped).
    """
    text_ids = np.atleast_2d(np.asarray(text_ids))
    text_valid = np.atleast_2d(np.asarray(text_valid, dtype=bool))
    if text_ids.shape != text_valid.shape:
        raise ContractError(
            f"assemble_joint_input: ids {text_ids.shape} vs valid {text_valid.shape}"
        )
    batch, n_text = text_ids.shape
    truncated = False
    room = config.max_len - config.N
    if n_text > room:
        text_ids = text_ids[:, :room]
        text_valid = text_valid[:, :room]
        n_text = room
        truncated = True

    vision = ad.add(ad.matmul(joint, params["bridge.w"]), params["bridge.b"])
    pos = params["emb.pos"]
    seg = params["emb.seg"]
    vision = ad.add(vision, ad.slice_(pos, slice(0, config.N)))
    vision = ad.add(vision, ad.slice_(seg, slice(Segment.VISION.value, Segment.VISION.value + 1)))

    text = ad.embedding(params["emb.token"], text_ids)
    text = ad.add(text, ad.slice_(pos, slice(config.N, config.N + n_text)))
    text = ad.add(text, ad.slice_(seg, slice(Segment.TEXT.value, Segment.TEXT.value + 1)))

    embedded = ad.concat([vision, text], axis=1)
    key_valid = np.concatenate(
        [np.ones((batch, config.N), dtype=bool), text_valid], axis=1
    )
    return EncoderInput(embedded=embedded, key_valid=key_valid, truncated=truncated)


def _mha(
    prefix: str,
    x_q: Tensor,
    x_kv: Tensor,
    mask: np.ndarray | None,
    params: dict[str, Tensor],
    config: ModelConfig,
) -> Tensor:
    heads, hd = config.n_heads, config.head_dim

    def split(x: Tensor) -> Tensor:
        b, t = x.shape[0], x.shape[1]
        return ad.transpose(ad.reshape(x, (b, t, heads, hd)), (0, 2, 1, 3))

    q = split(ad.add(ad.matmul(x_q, params[f"{prefix}.q.w"]), params[f"{prefix}.q.b"]))
    k = split(ad.add(ad.matmul(x_kv, params[f"{prefix}.k.w"]), params[f"{prefix}.k.b"]))
    v = split(ad.add(ad.matmul(x_kv, params[f"{prefix}.v.w"]), params[f"{prefix}.v.b"]))
    ctx = ad.scaled_dot_attention(q, k, v, mask)
    b, tq = x_q.shape[0], x_q.shape[1]
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, config.d_model))
    return ad.add(ad.matmul(merged, params[f"{prefix}.o.w"]), params[f"{prefix}.o.b"])


def _ln(prefix: str, x: Tensor, params: dict[str, Tensor]) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), params[f"{prefix}.g"]), params[f"{prefix}.b"])


def _ffn(prefix: str, x: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.fc1.w"]), params[f"{prefix}.fc1.b"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"])


def encoder_forward(enc_in: EncoderInput, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Unmasked (bidirectional) self-attention stack; padded keys hidden."""
    mask = ad.key_padding_mask(enc_in.key_valid, dtype=config.np_dtype)[:, None, :, :]
    x = enc_in.embedded
    for i in range(config.n_layers):
        x = _ln(f"enc.{i}.ln1", ad.add(x, _mha(f"enc.{i}.attn", x, x, mask, params, config)), params)
        x = _ln(f"enc.{i}.ln2", ad.add(x, _ffn(f"enc.{i}.ffn", x, params)), params)
    return x


def decoder_forward(
    prefix_ids: np.ndarray,
    enc_out: Tensor,
    enc_key_valid: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
) -> Tensor:
    """Causal self-attention over the target prefix, cross-attention to the
    encoder output, and projection to vocabulary logits per prefix position.

    Target padding must be a suffix: causal masking then keeps every scored
    position blind to it.
    """
    prefix_ids = np.atleast_2d(np.asarray(prefix_ids))
    if prefix_ids.shape[1] == 0:
        raise ContractError("decoder_forward: empty target prefix")
    if prefix_ids.shape[1] > config.max_len:
        raise ContractError(
            f"decoder_forward: prefix length {prefix_ids.shape[1]} exceeds max_len {config.max_len}"
        )
    b, t = prefix_ids.shape
    x = ad.embedding(params["emb.token"], prefix_ids)
    x = ad.add(x, ad.slice_(params["emb.pos"], slice(0, t)))
    causal = ad.causal_mask(t, dtype=config.np_dtype)
    cross = ad.key_padding_mask(enc_key_valid, dtype=config.np_dtype)[:, None, :, :]
    for i in range(config.n_layers):
        x = _ln(f"dec.{i}.ln1", ad.add(x, _mha(f"dec.{i}.self", x, x, causal, params, config)), params)
        x = _ln(f"dec.{i}.ln2", ad.add(x, _mha(f"dec.{i}.cross", x, enc_out, cross, params, config)), params)
        x = _ln(f"dec.{i}.ln3", ad.add(x, _ffn(f"dec.{i}.ffn", x, params)), params)
    return ad.add(ad.matmul(x, params["out.w"]), params["out.b"])


def forward(
    enc_in: EncoderInput,
    target_prefix: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
    bos_id: int,
) -> Tensor:
    """Full pass: logits over the vocabulary for every target-prefix position."""
    target_prefix = np.atleast_2d(np.asarray(target_prefix))
    if target_prefix.shape[1] == 0:
        raise ContractError("forward: empty target prefix")
    if not np.all(target_prefix[:, 0] == bos_id):
        raise ContractError("forward: target prefix must begin with BOS")
    enc_out = encoder_forward(enc_in, params, config)
    return decoder_forward(target_prefix, enc_out, enc_in.key_valid, params, config)


# ---------------------------------------------------------------------------
# Generation


def pad_text_batch(
    prompts: list[TokenSequence], pad_id: int
) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad prompt id lists into (B, T) ids plus validity mask."""
    width = max((len(p) for p in prompts), default=0)
    width = max(width, 1)
    ids = np.full((len(prompts), width), pad_id, dtype=np.int64)
    valid = np.zeros((len(prompts), width), dtype=bool)
    for r, p in enumerate(prompts):
        ids[r, : len(p)] = p.ids
        valid[r, : len(p)] = True
    return ids, valid


def generate_greedy_batch(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    current: np.ndarray,
    prior: np.ndarray,
    prompts: list[TokenSequence],
    max_new: int,
) -> list[str]:
    """Greedy decode for a batch of (visual pair, prompt) inputs.

    Appends the argmax token (ties resolve to the lowest id) until EOS or
    max_new; rows that finish early are frozen. Returns detokenized text
    with special tokens removed.
    """
    if max_new < 1:
        raise ContractError("generate_greedy_batch: max_new must be >= 1")
    if not prompts:
        return []
    with ad.no_grad():
        joint = project_scan_pair(current, prior, params, config)
        ids, valid = pad_text_batch(prompts, vocab.pad_id)
        enc_in = assemble_joint_input(joint, ids, valid, params, config)
        enc_out = encoder_forward(enc_in, params, config)

        batch = len(prompts)
        prefix = np.full((batch, 1), vocab.bos_id, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        limit = min(max_new, config.max_len - 1)
        for _ in range(limit):
            logits = decoder_forward(prefix, enc_out, enc_in.key_valid, params, config)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            nxt = np.where(done, vocab.pad_id, nxt)
            done |= nxt == vocab.eos_id
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            if done.all():
                break

    texts = []
    for row in prefix:
        out_ids = []
        for tok in row[1:]:
            if tok == vocab.eos_id:
                break
            out_ids.append(int(tok))
        texts.append(vocab.decode(out_ids))
    return texts


def generate_greedy(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    current: np.ndarray,
    prior: np.ndarray,
    prompt: TokenSequence,
    max_new: int,
) -> str:
    cur = np.asarray(current)[None] if np.asarray(current).ndim == 2 else np.asarray(current)
    pri = np.asarray(prior)[None] if np.asarray(prior).ndim == 2 else np.asarray(prior)
    return generate_greedy_batch(params, config, vocab, cur, pri, [prompt], max_new)[0]
