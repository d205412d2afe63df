"""One training iteration: batched play, policy-gradient surrogate, Adam updates.

Both agents maximize expected reward estimated by the score-function trick on
sampled play, plus an entropy bonus that keeps exploration alive. Per game the
speaker is credited with the mean reward over all listeners; its entropy bonus
covers every symbol slot except the last one. No reward baseline is
subtracted. Gradients are averaged over the batch, so the entropy weights do
not depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

from . import agents, autodiff as ad, game
from .agents import ListenerBatchResult, SpeakerBatchRollout, SpeakerRollout, TableSpeaker
from .autodiff import Tensor
from .game import ObjectSpace


@dataclass
class LearnerConfig:
    batch_size: int = 100
    learning_rate: float = 0.001
    lambda_speaker: float = 0.1
    lambda_listener: float = 0.05

    def __post_init__(self):
        if self.lambda_speaker <= 0 or self.lambda_listener <= 0:
            raise ValueError("entropy weights must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class IterationStats:
    """Batch means recorded for one training iteration."""

    iteration: int
    mean_reward: float
    speaker_entropy: float
    listener_entropy: float


def speaker_entropy_term(rollout: SpeakerRollout) -> float:
    """Entropy bonus for one rollout: step entropies for all but the last symbol."""
    return float(sum(rollout.entropies[:-1]))


@dataclass
class PlayedBatch:
    """A frozen batch of games and sampled actions, replayable through the graph."""

    targets: np.ndarray      # (B,)
    candidates: np.ndarray   # (B, 5)
    target_pos: np.ndarray   # (B,)
    messages: np.ndarray     # (B, l)
    guesses: np.ndarray      # (n_listeners, B)

    @property
    def rewards(self) -> np.ndarray:
        """Per-listener 0/1 rewards, shape (n_listeners, B)."""
        return (self.guesses == self.target_pos[None, :]).astype(np.float64)


def _sum_tensors(ts: list[Tensor]) -> Tensor:
    return reduce(ad.add, ts)


def _assemble_losses(speaker_roll: SpeakerBatchRollout | None,
                     listener_results: list[ListenerBatchResult],
                     rewards: np.ndarray, cfg: LearnerConfig,
                     update_speaker: bool, update_listeners: bool) -> Tensor | None:
    """Negated surrogate objective whose gradient is the policy-gradient estimate."""
    losses: list[Tensor] = []
    if update_speaker and speaker_roll is not None:
        speaker_rewards = rewards.mean(axis=0)
        pg = ad.mean_all(ad.mul(_sum_tensors(speaker_roll.step_log_probs), Tensor(speaker_rewards)))
        bonus_steps = speaker_roll.step_entropies[:-1]
        if bonus_steps:
            pg = ad.add(pg, ad.scale(ad.mean_all(_sum_tensors(bonus_steps)), cfg.lambda_speaker))
        losses.append(ad.neg(pg))
    if update_listeners:
        for res, r in zip(listener_results, rewards):
            pg = ad.mean_all(ad.mul(res.log_probs, Tensor(r)))
            pg = ad.add(pg, ad.scale(ad.mean_all(res.entropies), cfg.lambda_listener))
            losses.append(ad.neg(pg))
    if not losses:
        return None
    return _sum_tensors(losses)


def train_iteration(speaker, listeners: list, cfg: LearnerConfig, space: ObjectSpace,
                    rng: np.random.Generator, *, update_speaker: bool = True,
                    update_listeners: bool = True, speaker_mode: str = "sample",
                    iteration: int = 0) -> IterationStats:
    """Play one batch of games and apply one Adam step per flagged agent.

    Every listener hears the same message for the same game and guesses
    independently; the speaker's per-game reward is the mean of the listeners'
    0/1 rewards.
    """
    if not listeners:
        raise ValueError("at least one listener is required")
    is_table = isinstance(speaker, TableSpeaker)
    if update_speaker and (is_table or speaker_mode != "sample"):
        raise ValueError("speaker updates require a trainable speaker in sample mode")

    batch = game.sample_game_batch(space, cfg.batch_size, rng)
    enc = space.encoding_matrix()
    if is_table:
        speaker_roll = None
        messages = speaker.messages_for(batch.targets)
    else:
        if update_speaker:
            speaker_roll = agents.speak_batch(speaker, enc[batch.targets], speaker_mode, rng)
        else:
            with ad.no_grad():
                speaker_roll = agents.speak_batch(speaker, enc[batch.targets], speaker_mode, rng)
        messages = speaker_roll.messages

    cand_vecs = enc[batch.candidates]
    listener_results = [agents.listen_batch(lst, messages, cand_vecs, "sample", rng)
                        for lst in listeners]
    rewards = np.stack([(res.guesses == batch.target_pos).astype(np.float64)
                        for res in listener_results])

    total = _assemble_losses(speaker_roll, listener_results, rewards, cfg,
                             update_speaker and not is_table, update_listeners)
    if total is not None:
        ad.backward(total)
        if update_speaker and not is_table:
            ad.adam_step(speaker.pset, cfg.learning_rate)
            speaker.pset.zero_grad()
        if update_listeners:
            for lst in listeners:
                ad.adam_step(lst.pset, cfg.learning_rate)
                lst.pset.zero_grad()

    if speaker_roll is not None and len(speaker_roll.step_entropies) > 1:
        speaker_entropy = float(
            np.mean(sum(t.data for t in speaker_roll.step_entropies[:-1])))
    else:
        speaker_entropy = 0.0
    listener_entropy = float(np.mean([res.entropies.data.mean() for res in listener_results]))
    return IterationStats(
        iteration=iteration,
        mean_reward=float(rewards.mean()),
        speaker_entropy=speaker_entropy,
        listener_entropy=listener_entropy,
    )


def play_batch(speaker, listeners: list, cfg: LearnerConfig, space: ObjectSpace,
               rng: np.random.Generator, speaker_mode: str = "sample") -> PlayedBatch:
    """Sample a batch of games and actions without recording a graph."""
    batch = game.sample_game_batch(space, cfg.batch_size, rng)
    enc = space.encoding_matrix()
    with ad.no_grad():
        if isinstance(speaker, TableSpeaker):
            messages = speaker.messages_for(batch.targets)
        else:
            messages = agents.speak_batch(speaker, enc[batch.targets], speaker_mode, rng).messages
        guesses = np.stack([
            agents.listen_batch(lst, messages, enc[batch.candidates], "sample", rng).guesses
            for lst in listeners])
    return PlayedBatch(targets=batch.targets, candidates=batch.candidates,
                       target_pos=batch.target_pos, messages=messages, guesses=guesses)


def replay_losses(speaker, listeners: list, played: PlayedBatch, cfg: LearnerConfig,
                  space: ObjectSpace, *, update_speaker: bool = True,
                  update_listeners: bool = True) -> Tensor:
    """Rebuild the surrogate loss for a frozen batch (same graph, fixed actions)."""
    enc = space.encoding_matrix()
    speaker_roll = None
    if update_speaker and not isinstance(speaker, TableSpeaker):
        speaker_roll = agents.speak_batch(speaker, enc[played.targets], "sample",
                                          force=played.messages)
    listener_results = [
        agents.listen_batch(lst, played.messages, enc[played.candidates], "sample",
                            force=played.guesses[i])
        for i, lst in enumerate(listeners)]
    total = _assemble_losses(speaker_roll, listener_results, played.rewards, cfg,
                             update_speaker and speaker_roll is not None, update_listeners)
    if total is None:
        raise ValueError("nothing to differentiate: no agent flagged for updates")
    return total
