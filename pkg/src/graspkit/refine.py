"""Selector-guided hand translation refinement.

A 5x5x5 grid of candidate translations around the current one is scored by
penetration (plus an optional pluggable semantic scorer), pre-filtered to a
short list, rendered, and reduced by a mini-batch tournament: groups of at
most three images go to a selector that returns the best member, winners
advance, and the last survivor's translation is the refinement.

The selector is any callable taking a candidate group; the shipped
:class:`VlmSelector` talks to an OpenAI-compatible chat-completions vision
endpoint, and deterministic mock selectors cover offline runs and tests.
Every selector decision lands in a :class:`SelectionTranscript` that can be
replayed.
"""

from __future__ import annotations

import base64
import hashlib
import itertools
import json
import os
import re
import time
from dataclasses import dataclass, field

import numpy as np

from .hoiopt import HoiScene, evaluate_scene
from .render import default_hoi_camera, png_bytes, rasterize

DEFAULT_ETA = 0.01
DEFAULT_KEEP = 9
DEFAULT_BATCH = 3
TOKEN_ENV_VAR = "GRASPKIT_VLM_API_KEY"


class RefineError(Exception):
    pass


class SelectorTransportError(RefineError):
    """Endpoint unreachable after the configured retries."""


class SelectionFormatError(RefineError):
    """Selector reply unparseable or out of range after one re-prompt."""


class TournamentError(RefineError):
    """A group failed permanently; carries the transcript so far."""

    def __init__(self, message: str, transcript: "SelectionTranscript"):
        super().__init__(message)
        self.transcript = transcript


@dataclass
class Candidate:
    id: int
    offset: tuple[int, int, int]
    translation: np.ndarray
    score: float | None = None
    image: bytes | None = None


@dataclass
class CandidateSet:
    base_translation: np.ndarray
    eta: float
    candidates: list[Candidate]


@dataclass
class GroupRecord:
    members: list[int]                # candidate ids
    verdict: int                      # 1-based within the group
    raw_response: str | None = None
    bye: bool = False

    def to_dict(self) -> dict:
        return {
            "members": self.members,
            "verdict": self.verdict,
            "raw_response": self.raw_response,
            "bye": self.bye,
        }


@dataclass
class SelectionTranscript:
    rounds: list[GroupRecord] = field(default_factory=list)
    winner: int | None = None
    retry_log: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "winner": self.winner,
            "rounds": [r.to_dict() for r in self.rounds],
            "retry_log": self.retry_log,
        }


@dataclass
class SelectorReply:
    choice: int                       # 1-based within the group
    raw: str | None = None
    retries: list[dict] = field(default_factory=list)


def candidate_grid(t_init: np.ndarray, eta: float = DEFAULT_ETA) -> CandidateSet:
    """All 125 offsets in {-2..2}^3, lexicographic order, scaled by ``eta``."""
    t = np.asarray(t_init, dtype=float).reshape(3)
    candidates = []
    for cid, off in enumerate(itertools.product((-2, -1, 0, 1, 2), repeat=3)):
        candidates.append(
            Candidate(id=cid, offset=off, translation=t + eta * np.asarray(off, dtype=float))
        )
    return CandidateSet(base_translation=t.copy(), eta=eta, candidates=candidates)


def _candidate_scene_params(scene: HoiScene, candidate: Candidate):
    p = scene.params.copy()
    p.translation = candidate.translation.copy()
    return p


def penetration_value(scene: HoiScene, candidate: Candidate) -> float:
    """Penetration loss of the scene with the candidate's translation."""
    ev = evaluate_scene(scene, _candidate_scene_params(scene, candidate))
    pen = np.nonzero(ev.penetrating)[0]
    if len(pen) == 0:
        return 0.0
    diff = ev.hand_vertices[ev.nearest_hand[pen]] - scene.object_points[pen]
    return float(np.sum(diff * diff))


def prefilter(
    candidates: list[Candidate],
    scene: HoiScene,
    scorer=None,
    keep: int = DEFAULT_KEEP,
) -> list[Candidate]:
    """Rank by combined score and keep the best ``keep`` candidates.

    combined = -(min-max normalized penetration loss) + scorer(scene, cand).
    The default scorer contributes 0, making the ranking penetration-only.
    Ties keep enumeration order.
    """
    if keep > len(candidates):
        raise RefineError(f"keep={keep} exceeds candidate count {len(candidates)}")
    pene = np.array([penetration_value(scene, c) for c in candidates])
    span = pene.max() - pene.min()
    norm = (pene - pene.min()) / span if span > 0 else np.zeros_like(pene)
    semantic = np.array(
        [0.0 if scorer is None else float(scorer(scene, c)) for c in candidates]
    )
    combined = -norm + semantic
    for c, s in zip(candidates, combined):
        c.score = float(s)
    order = np.argsort(-combined, kind="stable")[:keep]
    return [candidates[i] for i in order]


def _normalize_reply(reply) -> SelectorReply:
    if isinstance(reply, SelectorReply):
        return reply
    return SelectorReply(choice=int(reply))


def tournament_select(
    candidates: list[Candidate], selector, batch: int = DEFAULT_BATCH
) -> tuple[Candidate, SelectionTranscript]:
    """Mini-batch elimination until a single candidate remains.

    Survivors are grouped in enumeration order; single-member groups advance
    without a selector call (recorded as byes).  Winners keep their original
    ids and images.  A selector exception aborts with the transcript so far.
    """
    if not candidates:
        raise RefineError("tournament needs at least one candidate")
    if batch < 2:
        raise RefineError("batch size must be at least 2")
    transcript = SelectionTranscript()
    survivors = list(candidates)
    while len(survivors) > 1:
        next_round: list[Candidate] = []
        for i in range(0, len(survivors), batch):
            group = survivors[i : i + batch]
            if len(group) == 1:
                transcript.rounds.append(
                    GroupRecord(members=[group[0].id], verdict=1, bye=True)
                )
                next_round.append(group[0])
                continue
            try:
                reply = _normalize_reply(selector(group))
            except RefineError as exc:
                transcript.retry_log.append({"group": [c.id for c in group], "error": str(exc)})
                raise TournamentError(
                    f"selector failed on group {[c.id for c in group]}: {exc}", transcript
                ) from exc
            if not 1 <= reply.choice <= len(group):
                raise TournamentError(
                    f"selector verdict {reply.choice} outside group of {len(group)}",
                    transcript,
                )
            transcript.retry_log.extend(reply.retries)
            transcript.rounds.append(
                GroupRecord(
                    members=[c.id for c in group],
                    verdict=reply.choice,
                    raw_response=reply.raw,
                )
            )
            next_round.append(group[reply.choice - 1])
        survivors = next_round
    transcript.winner = survivors[0].id
    return survivors[0], transcript


def replay_transcript(candidates: list[Candidate], transcript: SelectionTranscript) -> int:
    """Re-walk a transcript's rounds; returns the winner id it leads to."""
    by_id = {c.id: c for c in candidates}
    survivors = [c.id for c in candidates]
    cursor = 0
    while len(survivors) > 1:
        next_round = []
        taken = 0
        while taken < len(survivors):
            rec = transcript.rounds[cursor]
            group = survivors[taken : taken + len(rec.members)]
            if group != rec.members:
                raise RefineError(
                    f"transcript round {cursor} members {rec.members} != expected {group}"
                )
            next_round.append(group[rec.verdict - 1])
            taken += len(group)
            cursor += 1
        survivors = next_round
    if transcript.winner is not None and survivors[0] != transcript.winner:
        raise RefineError("transcript winner does not match replay")
    if survivors[0] not in by_id:
        raise RefineError("replayed winner is not among the candidates")
    return survivors[0]


# ---------------------------------------------------------------------------
# Selectors


def make_order_selector(key):
    """Selector induced by a strict total order: picks the group's max key."""

    def select(group: list[Candidate]) -> int:
        keys = [key(c) for c in group]
        return 1 + max(range(len(group)), key=lambda i: keys[i])

    return select


def make_penetration_selector(scene: HoiScene):
    """Greedy mock: picks the group member with the least penetration."""

    def select(group: list[Candidate]) -> int:
        values = [penetration_value(scene, c) for c in group]
        return 1 + min(range(len(group)), key=lambda i: (values[i], i))

    return select


def make_closest_to_base_selector(base_translation: np.ndarray):
    """Mock preferring the candidate nearest the unrefined translation."""
    base = np.asarray(base_translation, dtype=float)

    def select(group: list[Candidate]) -> int:
        d = [float(np.linalg.norm(c.translation - base)) for c in group]
        return 1 + min(range(len(group)), key=lambda i: (d[i], i))

    return select


_THINK_RE = re.compile(r"^\s*<think>.*?</think>\s*", re.DOTALL)
_SELECTION_RE = re.compile(r'\{\s*"selection"\s*:\s*(-?\d+)\s*\}')


def parse_selection(text: str, group_size: int) -> int:
    """Parse a selector reply: optional <think> block, then {"selection": n}.

    Raises :class:`SelectionFormatError` when the payload is missing or the
    index is outside 1..group_size.
    """
    stripped = _THINK_RE.sub("", text)
    m = _SELECTION_RE.search(stripped)
    if m is None:
        raise SelectionFormatError(f"no selection object found in reply: {text[:200]!r}")
    choice = int(m.group(1))
    if not 1 <= choice <= group_size:
        raise SelectionFormatError(
            f"selection {choice} outside valid range 1..{group_size}"
        )
    return choice


def build_selection_prompt(description: str, group_size: int, reminder: bool = False) -> str:
    """Instruction text sent with each candidate group."""
    lines = [
        "You compare renderings of a 3D hand interacting with an object and "
        "pick the one that best matches the target description.",
        f'Target description: "{description}"',
        f"You are given {group_size} images. Image k shows interaction number k.",
        "Judge only the hand placement relative to the object:",
        "- prefer contact on the semantically right part of the object;",
        "- if nothing touches, prefer the smallest finger-to-object gap;",
        "- ignore texture, lighting and background.",
        "You may think step by step inside a single <think>...</think> block.",
        'After it, answer with exactly one JSON object {"selection": k} where '
        f"k is an integer between 1 and {group_size}. No other text.",
    ]
    if reminder:
        lines.append(
            'FORMAT REMINDER: reply with {"selection": k}, '
            f"k an integer in 1..{group_size}; any other value is invalid."
        )
    return "\n".join(lines)


def request_fingerprint(body: dict) -> str:
    """Stable hash of a chat-completion request body (for scripted mocks)."""
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()


class ScriptedTransport:
    """Mock endpoint transport driven by a fixture mapping request hashes to
    canned replies.

    Fixture layout::

        {"responses": {"<sha256>": [reply, ...]}, "default": [reply, ...]}

    where each reply is ``{"content": "..."}"`` for a successful call,
    ``{"transport_error": "msg"}`` to simulate a network failure, or
    ``{"status": 500, "content": "..."}"`` for an HTTP error.  Replies are
    consumed in order; per-hash entries take precedence over the default
    queue.
    """

    def __init__(self, script: dict):
        self.by_hash = {k: list(v) for k, v in script.get("responses", {}).items()}
        self.default = list(script.get("default", []))
        self.calls: list[dict] = []

    @classmethod
    def from_file(cls, path) -> "ScriptedTransport":
        with open(path) as fh:
            return cls(json.load(fh))

    def __call__(self, body: dict) -> tuple[int, dict]:
        self.calls.append(body)
        key = request_fingerprint(body)
        queue = self.by_hash.get(key)
        if not queue:
            queue = self.default
        if not queue:
            raise SelectorTransportError(f"scripted transport has no reply for {key}")
        reply = queue.pop(0)
        if "transport_error" in reply:
            raise ConnectionError(str(reply["transport_error"]))
        status = int(reply.get("status", 200))
        return status, {"choices": [{"message": {"content": reply.get("content", "")}}]}


def _http_transport(base_url: str, api_key: str, timeout: float):
    import requests

    def post(body: dict) -> tuple[int, dict]:
        resp = requests.post(
            base_url.rstrip("/") + "/chat/completions",
            json=body,
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=timeout,
        )
        try:
            payload = resp.json()
        except ValueError:
            payload = {}
        return resp.status_code, payload

    return post


class VlmSelector:
    """Vision-endpoint selector for candidate groups.

    Sends one chat-completion request per group: the instruction text plus
    each candidate's PNG as a base64 data URI.  Transport failures retry with
    exponential backoff (3 attempts); a malformed or out-of-range reply gets
    exactly one re-prompt with the format reminder before failing.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        description: str,
        api_key: str | None = None,
        api_key_env: str = TOKEN_ENV_VAR,
        timeout: float = 60.0,
        transport=None,
        max_attempts: int = 3,
        backoff: float = 0.5,
        sleep=time.sleep,
    ):
        if transport is None:
            if api_key is None:
                api_key = os.environ.get(api_key_env)
            if not api_key:
                raise RefineError(
                    f"VLM selector needs an API key: set {api_key_env} or pass api_key"
                )
            transport = _http_transport(base_url, api_key, timeout)
        self.transport = transport
        self.model = model
        self.description = description
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.sleep = sleep

    def _build_body(self, group: list[Candidate], reminder: bool) -> dict:
        content: list[dict] = [
            {
                "type": "text",
                "text": build_selection_prompt(self.description, len(group), reminder),
            }
        ]
        for c in group:
            if c.image is None:
                raise RefineError(f"candidate {c.id} has no rendered image")
            uri = "data:image/png;base64," + base64.b64encode(c.image).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": uri}})
        return {"model": self.model, "messages": [{"role": "user", "content": content}]}

    def _post_with_retries(self, body: dict, retries: list[dict]) -> dict:
        last_error = None
        for attempt in range(self.max_attempts):
            try:
                status, payload = self.transport(body)
            except Exception as exc:  # transport-level failure
                last_error = exc
                retries.append({"kind": "transport", "attempt": attempt + 1, "error": str(exc)})
                if attempt + 1 < self.max_attempts:
                    self.sleep(self.backoff * (2 ** attempt))
                continue
            if status != 200:
                last_error = RuntimeError(f"HTTP {status}")
                retries.append({"kind": "http", "attempt": attempt + 1, "status": status})
                if attempt + 1 < self.max_attempts:
                    self.sleep(self.backoff * (2 ** attempt))
                continue
            return payload
        raise SelectorTransportError(
            f"endpoint failed after {self.max_attempts} attempts: {last_error}"
        )

    def __call__(self, group: list[Candidate]) -> SelectorReply:
        retries: list[dict] = []
        raw = None
        for prompt_round in range(2):  # initial request + one format re-prompt
            body = self._build_body(group, reminder=prompt_round == 1)
            payload = self._post_with_retries(body, retries)
            try:
                raw = payload["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise SelectionFormatError(f"malformed endpoint payload: {exc}") from exc
            try:
                choice = parse_selection(raw, len(group))
                return SelectorReply(choice=choice, raw=raw, retries=retries)
            except SelectionFormatError as exc:
                retries.append({"kind": "format", "round": prompt_round + 1, "error": str(exc)})
        raise SelectionFormatError(
            f"selector reply stayed invalid after re-prompt: {raw[:200]!r}"
        )


# ---------------------------------------------------------------------------
# End-to-end refinement


def default_renderer(scene: HoiScene, candidate: Candidate, width: int = 512, height: int = 512) -> bytes:
    """PNG of the composed scene with the candidate's translation applied."""
    from .geometry import TriMesh

    ev = evaluate_scene(scene, _candidate_scene_params(scene, candidate))
    hand_mesh = TriMesh(ev.hand_vertices, scene.model.faces)
    object_mesh = scene.concise.mesh
    pts = np.concatenate([ev.hand_vertices, object_mesh.vertices], axis=0)
    camera = default_hoi_camera(pts.min(axis=0), pts.max(axis=0), width=width, height=height)
    img = rasterize(
        [(object_mesh, (0.85, 0.62, 0.25)), (hand_mesh, (0.80, 0.55, 0.45))], camera
    )
    return png_bytes(img)


def refine_translation(
    scene: HoiScene,
    selector,
    renderer=default_renderer,
    eta: float = DEFAULT_ETA,
    keep: int = DEFAULT_KEEP,
    batch: int = DEFAULT_BATCH,
    scorer=None,
) -> tuple[np.ndarray, SelectionTranscript, CandidateSet]:
    """Grid, pre-filter, render, tournament; the scene itself is untouched.

    Returns (refined translation, transcript, the full candidate set with
    pre-filter scores filled in).
    """
    grid = candidate_grid(scene.params.translation, eta)
    survivors = prefilter(grid.candidates, scene, scorer=scorer, keep=keep)
    if renderer is not None:
        for c in survivors:
            c.image = renderer(scene, c)
    winner, transcript = tournament_select(survivors, selector, batch=batch)
    return winner.translation.copy(), transcript, grid
