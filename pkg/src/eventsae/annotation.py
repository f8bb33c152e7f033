"""Phrase / phase labels for event clusters.

Two annotators share one ``annotate(prompt, clips_meta) -> str`` call: an HTTP
JSON client for a hosted vision-language model, and a deterministic stub that
reads synthetic-world event logs.
"""

from __future__ import annotations

import json
import os
import time
import urllib.error
import urllib.request
from collections import Counter

from .errors import AnnotatorUnavailable, MalformedAnnotation
from .events import PHASES

ENV_URL = "EVENTSAE_ANNOTATOR_URL"
ENV_KEY = "EVENTSAE_ANNOTATOR_KEY"
FRAMES_PER_CLIP = 5
MAX_ATTEMPTS = 3

PROMPT_TEMPLATE = """\
Label one recurring event from a robot manipulation task.

Input: {n_clips} clips, each {n_frames} frames in time order, taken from
different episodes of the same task and grouped together automatically.
Describe the event the clips have in common rather than per-episode detail.
Use a short dynamic phrase (for example "approaching", "releasing").

Task instruction: "{task}"
Cluster id: {cluster_id}
Episode coverage: {coverage:.2f}

Pick one phase label from: {phases}.

Answer with a single JSON object holding exactly the keys "phrase" and
"phase". No list, no extra keys, no markdown.
"""

# Fixed mapping used by the stub; mirrored in tests/golden/stub_annotations.json.
STUB_TABLE = {
    "approach_start": ("approaching object", "pre_grasp"),
    "grasp_close": ("closing gripper on object", "immobilization"),
    "transport_start": ("carrying object toward target", "post_grasp"),
    "release_open": ("releasing object", "detach"),
    "withdraw": ("withdrawing gripper", "transition"),
    None: ("holding still", "transition"),
}


def render_prompt(task_description, cluster, n_clips, n_frames=FRAMES_PER_CLIP):
    return PROMPT_TEMPLATE.format(n_clips=n_clips, n_frames=n_frames, task=task_description,
                                  cluster_id=cluster.cluster_id, coverage=cluster.coverage,
                                  phases=", ".join(PHASES))


def parse_annotation(text):
    """Strict parse of ``{"phrase": str, "phase": <closed set>}``."""
    try:
        obj = json.loads(text) if isinstance(text, (str, bytes)) else text
    except json.JSONDecodeError as e:
        raise MalformedAnnotation(f"not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise MalformedAnnotation(f"top-level value must be an object, got {type(obj).__name__}")
    if set(obj) != {"phrase", "phase"}:
        raise MalformedAnnotation(f"expected keys phrase and phase, got {sorted(obj)}")
    phrase, phase = obj["phrase"], obj["phase"]
    if not isinstance(phrase, str) or not phrase.strip():
        raise MalformedAnnotation("phrase must be a non-empty string")
    if phase not in PHASES:
        raise MalformedAnnotation(f"phase {phase!r} not in {PHASES}")
    return phrase.strip(), phase


class RemoteAnnotator:
    """POSTs ``{"prompt", "clips"}`` to ``$EVENTSAE_ANNOTATOR_URL`` and returns
    the response body, which must be the annotation object."""

    def __init__(self, url=None, key=None, timeout=30.0, backoff=1.0):
        self.url = url or os.environ.get(ENV_URL)
        self.key = key or os.environ.get(ENV_KEY)
        self.timeout = timeout
        self.backoff = backoff

    def annotate(self, prompt, clips_meta):
        if not self.url:
            raise AnnotatorUnavailable(f"no annotator endpoint; set {ENV_URL}")
        body = json.dumps({"prompt": prompt, "clips": clips_meta}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        last = None
        for attempt in range(MAX_ATTEMPTS):
            req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return resp.read().decode("utf-8")
            except (urllib.error.URLError, OSError) as e:
                last = e
                if attempt + 1 < MAX_ATTEMPTS:
                    time.sleep(self.backoff * (attempt + 1))
        raise AnnotatorUnavailable(f"annotator failed after {MAX_ATTEMPTS} attempts: {last}")


class StubAnnotator:
    """Labels a cluster by the scripted event nearest its members.

    ``event_logs`` maps episode id to ``[(event_type, t), ...]``; a member
    matches an event within ``tolerance`` steps.
    """

    def __init__(self, event_logs, tolerance=2):
        self.event_logs = event_logs
        self.tolerance = tolerance

    def event_type(self, members):
        votes = Counter()
        for m in members:
            best, best_dt = None, self.tolerance + 1
            for etype, t in self.event_logs.get(m["episode_id"], ()):
                dt = abs(int(t) - int(m["t_i"]))
                if dt < best_dt:
                    best, best_dt = etype, dt
            votes[best] += 1
        if not votes:
            return None
        # most common; ties broken by table order
        order = list(STUB_TABLE)
        return max(votes, key=lambda e: (votes[e], -order.index(e)))

    def annotate(self, prompt, clips_meta):
        phrase, phase = STUB_TABLE[self.event_type(clips_meta)]
        return json.dumps({"phrase": phrase, "phase": phase})


def annotate_cluster(cluster, exemplars, annotator, task_description=""):
    """Fill the prompt for one cluster, query the annotator, parse strictly.

    ``exemplars`` are keyframe bundles (or keyframes) drawn from the cluster.
    """
    clips = []
    for ex in exemplars:
        k = getattr(ex, "keyframe", ex)
        frames = list(getattr(ex, "strip", ()))
        clips.append({"episode_id": k.episode_id, "t_i": k.t_i, "frames": frames})
    prompt = render_prompt(task_description, cluster, len(clips))
    return parse_annotation(annotator.annotate(prompt, clips))


def annotate_all(clusters, annotator, task_descriptions, max_exemplars=8):
    """Annotate clusters in order (serialized), filling ``phrase``/``phase``."""
    for c in clusters:
        ex = c.members[:max_exemplars]
        c.phrase, c.phase = annotate_cluster(c, ex, annotator, task_descriptions.get(c.task_id, ""))
    return clusters
