"""Speaker and listener policies: embedding, one LSTM each, softmax heads.

The speaker starts its LSTM from the target-object embedding, feeds a zero
vector as the start token, then feeds each uttered symbol back as a one-hot.
The listener runs its LSTM over the received symbols from zero states and
scores each candidate by a dot product between the transformed final hidden
state and the candidate embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .game import N_CANDIDATES, ObjectSpace

Message = tuple[int, ...]

DEFAULT_VOCAB_SIZE = 8
DEFAULT_MESSAGE_LENGTH = 2
DEFAULT_HIDDEN_SIZE = 100


def _uniform_matrix(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _lstm_params(rng: np.random.Generator, input_dim: int, hidden: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for gate in ("i", "f", "g", "o"):
        params[f"wx_{gate}"] = Tensor(_uniform_matrix(rng, input_dim, hidden))
        params[f"wh_{gate}"] = Tensor(_uniform_matrix(rng, hidden, hidden))
        params[f"b_{gate}"] = Tensor(np.zeros(hidden))
    return params


class SpeakerPolicy:
    """Maps a target encoding to a fixed-length symbol sequence, stochastically."""

    kind = "speaker"

    def __init__(self, input_dim: int, vocab_size: int = DEFAULT_VOCAB_SIZE,
                 message_length: int = DEFAULT_MESSAGE_LENGTH,
                 hidden_size: int = DEFAULT_HIDDEN_SIZE,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.input_dim = input_dim
        self.vocab_size = vocab_size
        self.message_length = message_length
        self.hidden_size = hidden_size
        params = {
            "embed_w": Tensor(_uniform_matrix(rng, input_dim, hidden_size)),
            "embed_b": Tensor(np.zeros(hidden_size)),
            "out_w": Tensor(_uniform_matrix(rng, hidden_size, vocab_size)),
            "out_b": Tensor(np.zeros(vocab_size)),
        }
        params.update(_lstm_params(rng, vocab_size, hidden_size))
        self.pset = ParameterSet(params)


class ListenerPolicy:
    """Maps a message plus five candidate encodings to a guess, stochastically."""

    kind = "listener"

    def __init__(self, input_dim: int, vocab_size: int = DEFAULT_VOCAB_SIZE,
                 message_length: int = DEFAULT_MESSAGE_LENGTH,
                 hidden_size: int = DEFAULT_HIDDEN_SIZE,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.input_dim = input_dim
        self.vocab_size = vocab_size
        self.message_length = message_length
        self.hidden_size = hidden_size
        self.n_candidates = N_CANDIDATES
        params = {
            "embed_w": Tensor(_uniform_matrix(rng, input_dim, hidden_size)),
            "embed_b": Tensor(np.zeros(hidden_size)),
            "out_w": Tensor(_uniform_matrix(rng, hidden_size, hidden_size)),
            "out_b": Tensor(np.zeros(hidden_size)),
        }
        params.update(_lstm_params(rng, vocab_size, hidden_size))
        self.pset = ParameterSet(params)


class TableSpeaker:
    """Deterministic speaker defined by an object -> message lookup table."""

    kind = "table-speaker"

    def __init__(self, messages: np.ndarray):
        messages = np.asarray(messages, dtype=np.int64)
        if messages.ndim != 2:
            raise ValueError("expected a (n_objects, message_length) symbol array")
        self.table = messages
        self.message_length = messages.shape[1]

    def messages_for(self, target_ids: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(target_ids, dtype=np.intp)]


def init_policy(kind: str, space: ObjectSpace, seed,
                vocab_size: int = DEFAULT_VOCAB_SIZE,
                message_length: int = DEFAULT_MESSAGE_LENGTH,
                hidden_size: int = DEFAULT_HIDDEN_SIZE):
    """Fresh policy (parameters and optimizer state) for the given object space."""
    rng = np.random.default_rng(seed)
    cls = {"speaker": SpeakerPolicy, "listener": ListenerPolicy}.get(kind)
    if cls is None:
        raise ValueError(f"unknown policy kind '{kind}'")
    return cls(space.encoding_dim, vocab_size=vocab_size, message_length=message_length,
               hidden_size=hidden_size, rng=rng)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class SpeakerRollout:
    """One spoken message with its per-step log-probs and step entropies."""

    message: Message
    log_probs: tuple[float, ...]
    entropies: tuple[float, ...]


@dataclass
class SpeakerBatchRollout:
    messages: np.ndarray            # (B, l) int
    step_log_probs: list[Tensor]    # l tensors of shape (B,)
    step_entropies: list[Tensor]    # l tensors of shape (B,)


@dataclass
class ListenerBatchResult:
    guesses: np.ndarray             # (B,) int
    log_probs: Tensor               # (B,)
    entropies: Tensor               # (B,)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample one index per row of a probability matrix."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1))
    return np.minimum((cdf < u).sum(axis=1), probs.shape[1] - 1)


def _choose(probs: np.ndarray, mode: str, rng: np.random.Generator | None) -> np.ndarray:
    if mode == "argmax":
        return probs.argmax(axis=1)  # ties resolve to the lowest index
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        return _sample_rows(probs, rng)
    raise ValueError(f"unknown mode '{mode}'")


def _lstm_weights(pset: ParameterSet) -> dict[str, Tensor]:
    return {name: pset[name] for name in ad.LSTM_GATE_NAMES}


def one_hot(indices: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(indices), width))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def speak_batch(policy: SpeakerPolicy, target_vecs: np.ndarray, mode: str,
                rng: np.random.Generator | None = None,
                force: np.ndarray | None = None) -> SpeakerBatchRollout:
    """Roll out messages for a batch of targets.

    ``force`` replays fixed symbol choices through the same graph, which is
    how surrogate losses are rebuilt for gradient checks.
    """
    tv = np.asarray(target_vecs, dtype=np.float64)
    if tv.ndim != 2 or tv.shape[1] != policy.input_dim:
        raise ad.ShapeMismatch("speak", tv.shape, (policy.input_dim,))
    b = tv.shape[0]
    p = policy.pset
    w = _lstm_weights(p)
    h = ad.affine(Tensor(tv), p["embed_w"], p["embed_b"])
    c = Tensor(np.zeros((b, policy.hidden_size)))
    x = Tensor(np.zeros((b, policy.vocab_size)))  # start token
    messages = np.empty((b, policy.message_length), dtype=np.int64)
    log_probs: list[Tensor] = []
    entropies: list[Tensor] = []
    for step in range(policy.message_length):
        h, c = ad.lstm_step(x, h, c, w)
        probs = ad.softmax(ad.affine(h, p["out_w"], p["out_b"]))
        if force is not None:
            symbols = np.asarray(force[:, step], dtype=np.int64)
        else:
            symbols = _choose(probs.data, mode, rng)
        messages[:, step] = symbols
        log_probs.append(ad.log(ad.gather_rows(probs, symbols)))
        entropies.append(ad.entropy_rows(probs))
        x = Tensor(one_hot(symbols, policy.vocab_size))
    return SpeakerBatchRollout(messages, log_probs, entropies)


def speak(policy: SpeakerPolicy, target_vec: np.ndarray, mode: str,
          rng: np.random.Generator | None = None) -> SpeakerRollout:
    """Speak one message for a single target encoding."""
    roll = speak_batch(policy, np.asarray(target_vec)[None, :], mode, rng)
    return SpeakerRollout(
        message=tuple(int(s) for s in roll.messages[0]),
        log_probs=tuple(float(t.data[0]) for t in roll.step_log_probs),
        entropies=tuple(float(t.data[0]) for t in roll.step_entropies),
    )


def listen_batch(policy: ListenerPolicy, messages: np.ndarray, candidate_vecs: np.ndarray,
                 mode: str, rng: np.random.Generator | None = None,
                 force: np.ndarray | None = None) -> ListenerBatchResult:
    """Guess the target slot for a batch of (message, candidates) rounds."""
    msgs = np.asarray(messages, dtype=np.int64)
    cv = np.asarray(candidate_vecs, dtype=np.float64)
    if msgs.ndim != 2 or msgs.shape[1] != policy.message_length:
        raise ValueError(f"expected messages of length {policy.message_length}, got shape {msgs.shape}")
    if cv.ndim != 3 or cv.shape[1] != policy.n_candidates or cv.shape[2] != policy.input_dim:
        raise ValueError(f"expected candidate array of shape (B, {policy.n_candidates}, "
                         f"{policy.input_dim}), got {cv.shape}")
    b = msgs.shape[0]
    p = policy.pset
    w = _lstm_weights(p)
    flat = ad.affine(Tensor(cv.reshape(b * policy.n_candidates, policy.input_dim)),
                     p["embed_w"], p["embed_b"])
    u = ad.reshape(flat, (b, policy.n_candidates, policy.hidden_size))
    h = Tensor(np.zeros((b, policy.hidden_size)))
    c = Tensor(np.zeros((b, policy.hidden_size)))
    for step in range(policy.message_length):
        x = Tensor(one_hot(msgs[:, step], policy.vocab_size))
        h, c = ad.lstm_step(x, h, c, w)
    q = ad.affine(h, p["out_w"], p["out_b"])
    probs = ad.softmax(ad.candidate_scores(q, u))
    if force is not None:
        guesses = np.asarray(force, dtype=np.int64)
    else:
        guesses = _choose(probs.data, mode, rng)
    return ListenerBatchResult(
        guesses=guesses,
        log_probs=ad.log(ad.gather_rows(probs, guesses)),
        entropies=ad.entropy_rows(probs),
    )


def listen(policy: ListenerPolicy, message: Message, candidate_vecs: np.ndarray,
           mode: str, rng: np.random.Generator | None = None) -> tuple[int, float, float]:
    """Guess once; returns (guess index, log-prob of the guess, guess entropy)."""
    res = listen_batch(policy, np.asarray(message)[None, :],
                       np.asarray(candidate_vecs)[None, :, :], mode, rng)
    return int(res.guesses[0]), float(res.log_probs.data[0]), float(res.entropies.data[0])


# ---------------------------------------------------------------------------
# checkpoints


def save_policy(path, policy) -> None:
    """Write a policy checkpoint (parameters plus dimensions), bit-exact."""
    meta = {
        "meta_kind": np.array(policy.kind),
        "meta_input_dim": np.array(policy.input_dim),
        "meta_vocab_size": np.array(policy.vocab_size),
        "meta_message_length": np.array(policy.message_length),
        "meta_hidden_size": np.array(policy.hidden_size),
    }
    arrays = {f"p_{name}": t.data for name, t in policy.pset.items()}
    ad.save_arrays(path, {**meta, **arrays})


def load_policy(path):
    """Load a policy checkpoint written by ``save_policy``."""
    raw = ad.load_arrays(path)
    kind = str(raw["meta_kind"])
    cls = {"speaker": SpeakerPolicy, "listener": ListenerPolicy}[kind]
    policy = cls(int(raw["meta_input_dim"]), vocab_size=int(raw["meta_vocab_size"]),
                 message_length=int(raw["meta_message_length"]),
                 hidden_size=int(raw["meta_hidden_size"]),
                 rng=np.random.default_rng(0))
    for name, t in policy.pset.items():
        t.data = raw[f"p_{name}"].astype(np.float64)
    return policy


def params_checksum(policy) -> str:
    """SHA-256 over all parameter bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(dict(policy.pset.items())):
        h.update(name.encode())
        h.update(policy.pset[name].data.tobytes())
    return h.hexdigest()
