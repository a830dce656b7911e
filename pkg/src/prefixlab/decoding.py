"""Length-normalized beam search over the prefix transformer decoder.

beam=1 reduces exactly to greedy argmax decoding. Candidate beams are
ranked by cumulative log-probability while alive; the final hypothesis
maximizes log-probability divided by generated length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import AttentionPlanner, PrefixSeq2Seq


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool

    @property
    def normalized(self) -> float:
        return self.logprob / max(1, len(self.tokens))


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - np.log(np.exp(z).sum())


def beam_decode(
    model: PrefixSeq2Seq,
    src_ids: np.ndarray,
    planner: AttentionPlanner,
    bos_id: int,
    eos_id: int | None,
    max_len: int,
    beam: int = 5,
    spans: tuple[int, ...] | None = None,
) -> list[int]:
    """Decode one source sequence; returns generated ids without BOS/EOS."""
    if beam < 1:
        raise ConfigError("beam must be >= 1")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    src = np.asarray(src_ids)[None, :]
    enc_out, _ = model.encode(src, planner, spans)
    enc_data = enc_out.data

    alive = [Hypothesis((), 0.0, False)]
    done: list[Hypothesis] = []
    from . import autodiff as ad

    for _ in range(max_len):
        dec_in = np.array([(bos_id,) + h.tokens for h in alive])
        enc_batch = ad.constant(np.repeat(enc_data, len(alive), axis=0))
        logits, _ = model.decode(dec_in, enc_batch, planner)
        last = logits.data[:, -1, :]
        candidates: list[Hypothesis] = []
        for i, hyp in enumerate(alive):
            logp = _log_softmax(last[i])
            top = np.argsort(-logp, kind="stable")[:beam]
            for tok in top:
                candidates.append(Hypothesis(hyp.tokens + (int(tok),),
                                             hyp.logprob + float(logp[tok]),
                                             eos_id is not None and int(tok) == eos_id))
        candidates.sort(key=lambda h: (-h.logprob, h.tokens))
        kept = candidates[:beam]
        alive = [h for h in kept if not h.finished]
        done.extend(h for h in kept if h.finished)
        if not alive:
            break
    done.extend(alive)
    best = max(done, key=lambda h: (h.normalized, -len(h.tokens)))
    tokens = list(best.tokens)
    if eos_id is not None and tokens and tokens[-1] == eos_id:
        tokens.pop()
    return tokens


def greedy_decode(model, src_ids, planner, bos_id, eos_id, max_len,
                  spans=None) -> list[int]:
    return beam_decode(model, src_ids, planner, bos_id, eos_id, max_len,
                       beam=1, spans=spans)


def sequence_logprob(model, src_ids, tokens, planner, bos_id,
                     eos_id=None, spans=None) -> float:
    """Teacher-forced log-probability of ``tokens`` (+EOS when given)."""
    labels = list(tokens) + ([eos_id] if eos_id is not None else [])
    dec_in = np.array([[bos_id] + labels[:-1]])
    logits, _ = model.forward(np.asarray(src_ids)[None, :],
                              dec_in, planner, spans)
    total = 0.0
    for pos, tok in enumerate(labels):
        total += float(_log_softmax(logits.data[0, pos])[tok])
    return total
