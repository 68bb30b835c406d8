"""Execution-time communication: gated request/reply rounds and overhead.

Each timestep runs one synchronous round. An agent whose top-2 action-value
gap falls below delta1 broadcasts a request (requests carry no payload and
are not billed); every other agent whose current message variance clears
delta2 replies with its message. Overhead beta is the fraction of directed
(replier, requester) pairs that actually carried a message.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .agent import message_variance
from .nn import Array


@dataclass
class CommConfig:
    """Gating thresholds. +/-inf sentinels are valid and meaningful."""

    delta1: float = float("inf")
    delta2: float = float("-inf")


@dataclass
class StepRecord:
    t: int
    requesters: list[int]
    reply_pairs: list[tuple[int, int]]  # (replier j, requester i)

    @property
    def g(self) -> int:
        return len(self.reply_pairs)


class CommLog:
    """Per-timestep communication records for one episode."""

    def __init__(self, n_agents: int):
        self.n_agents = n_agents
        self.records: list[StepRecord] = []

    def append(self, record: StepRecord) -> None:
        r_max = self.n_agents * (self.n_agents - 1)
        if record.g > r_max:
            raise ValueError(f"g={record.g} exceeds R={r_max}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def beta(self) -> float:
        return beta(self)

    def dump_jsonl(self, fh, episode: int = None) -> None:
        for rec in self.records:
            row = {"t": rec.t, "requesters": list(rec.requesters),
                   "reply_pairs": [list(p) for p in rec.reply_pairs],
                   "g_t": rec.g}
            if episode is not None:
                row["episode"] = episode
            fh.write(json.dumps(row) + "\n")

    @classmethod
    def load_jsonl(cls, fh, n_agents: int) -> "CommLog":
        log = cls(n_agents)
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            log.append(StepRecord(row["t"], row["requesters"],
                                  [tuple(p) for p in row["reply_pairs"]]))
        return log


def confidence_gap(q_local: Array) -> float:
    """Difference between the largest and second-largest action values."""
    q = np.asarray(q_local, dtype=np.float64)
    if q.size < 2:
        raise ValueError("confidence gap needs at least two action values")
    top2 = np.partition(q, -2)[-2:]
    return float(top2[1] - top2[0])


def protocol_step(q_locals: list[Array], messages: list[Array],
                  cfg: CommConfig, t: int = 0,
                  alive: list[bool] = None) -> tuple[list[Array], StepRecord]:
    """One synchronous request/reply round.

    q_locals[i] are the local action values and messages[i] the encoder
    output f_enc(c_i) for this same timestep (the caller runs the shared
    encoder once per agent). Returns the per-agent combined action values
    and the communication record. Replies are added in ascending replier
    order so results are bit-equal to summing the same message list.
    """
    n = len(q_locals)
    if alive is None:
        alive = [True] * n
    combined = [np.asarray(q, dtype=np.float64).copy() for q in q_locals]
    record = StepRecord(t=t, requesters=[], reply_pairs=[])
    if n < 2:
        return combined, record

    n_actions = np.asarray(q_locals[0]).size
    can_reply = [alive[j]
                 and message_variance(messages[j]) >= cfg.delta2
                 for j in range(n)]
    for i in range(n):
        if not alive[i]:
            continue
        if n_actions < 2 or confidence_gap(q_locals[i]) >= cfg.delta1:
            continue  # confident enough to act locally
        record.requesters.append(i)
        for j in range(n):
            if j == i or not can_reply[j]:
                continue
            combined[i] += messages[j]
            record.reply_pairs.append((j, i))
    return combined, record


def beta(log: CommLog, episode_len: int = None) -> float:
    """Sum of g_t over directed pairs and steps: sum g_t / (R * T)."""
    if log.n_agents < 2:
        return 0.0
    t_total = episode_len if episode_len is not None else len(log)
    if t_total < 1:
        raise ValueError("beta needs at least one timestep")
    r = log.n_agents * (log.n_agents - 1)
    return sum(rec.g for rec in log.records) / (r * t_total)
