"""Synthetic symbolic videos with controllable richness.

A clip is 16 frames of a G x G symbol grid, cut into 4 segments of 4 frames.
Richness is ``#entities + 2 * #events`` by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import COLORS, SHAPES

NUM_FRAMES = 16
NUM_SEGMENTS = 4
FRAMES_PER_SEGMENT = NUM_FRAMES // NUM_SEGMENTS
RICHNESS_CEILING = 24
EVENT_WEIGHT = 2

EVENT_KINDS = ("move_left", "move_right", "move_up", "move_down", "appear", "disappear")
MOVE_DELTA = {"move_left": (0, -1), "move_right": (0, 1), "move_up": (-1, 0), "move_down": (1, 0)}
# events only fall strictly inside a segment so every change is visible within one segment
EVENT_FRAMES = tuple(f for f in range(NUM_FRAMES) if f % FRAMES_PER_SEGMENT)

NUM_SYMBOLS = 1 + len(SHAPES) * len(COLORS)


class GenerationError(ValueError):
    pass


def symbol_id(shape, color):
    return 1 + SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


@dataclass(frozen=True)
class Entity:
    id: int
    shape: str
    color: str
    position: tuple  # (row, col) at the first frame it is visible


@dataclass(frozen=True)
class MotionEvent:
    entity_id: int
    kind: str
    frame_index: int

    @property
    def segment(self):
        return self.frame_index // FRAMES_PER_SEGMENT


@dataclass(eq=False)
class Clip:
    clip_id: str
    grid: int
    frames: np.ndarray  # (16, G, G) int8 symbol ids, 0 = empty
    entities: list = field(default_factory=list)
    events: list = field(default_factory=list)
    richness: int = 0
    # positions[f][entity_id] -> (row, col), absent when the entity is not visible
    positions: list = field(default_factory=list, repr=False)

    def __eq__(self, other):
        if not isinstance(other, Clip):
            return NotImplemented
        return (self.clip_id == other.clip_id and self.grid == other.grid
                and np.array_equal(self.frames, other.frames)
                and self.entities == other.entities and self.events == other.events
                and self.richness == other.richness and self.positions == other.positions)

    @property
    def segments(self):
        return [self.frames[s * FRAMES_PER_SEGMENT:(s + 1) * FRAMES_PER_SEGMENT]
                for s in range(NUM_SEGMENTS)]

    def entity(self, entity_id):
        return self.entities[entity_id]

    def segment_frames(self, s):
        return range(s * FRAMES_PER_SEGMENT, (s + 1) * FRAMES_PER_SEGMENT)

    def visible_in_segment(self, s):
        seen = {}
        for f in self.segment_frames(s):
            for eid, pos in self.positions[f].items():
                seen.setdefault(eid, (f, pos))
        return seen

    def segment_events(self, s):
        return [e for e in self.events if e.segment == s]

    def segment_richness(self, s):
        return len(self.visible_in_segment(s)) + EVENT_WEIGHT * len(self.segment_events(s))


def _render(grid, positions, entities):
    frames = np.zeros((NUM_FRAMES, grid, grid), dtype=np.int8)
    for f, pos in enumerate(positions):
        for eid, (r, c) in pos.items():
            e = entities[eid]
            frames[f, r, c] = symbol_id(e.shape, e.color)
    return frames


def _simulate(rng, grid, n_entities, n_events):
    combos = [(s, c) for s in SHAPES for c in COLORS]
    picks = rng.choice(len(combos), size=n_entities, replace=False)
    looks = [combos[i] for i in picks]

    replace = n_events > len(EVENT_FRAMES)
    frames_of_events = sorted(rng.choice(EVENT_FRAMES, size=n_events, replace=replace).tolist())
    kinds = rng.choice(["move", "appear", "disappear"], size=n_events, p=[0.6, 0.2, 0.2]).tolist()
    n_appear = min(kinds.count("appear"), n_entities - 1)
    hidden = set(rng.choice(n_entities, size=n_appear, replace=False).tolist()) if n_appear else set()

    cells = rng.permutation(grid * grid)
    visible = {}
    k = 0
    for eid in range(n_entities):
        if eid not in hidden:
            visible[eid] = divmod(int(cells[k]), grid)
            k += 1
    pending = sorted(hidden)
    events = []
    positions = []
    first_pos = dict(visible)
    queue = []
    ev_i = 0
    for f in range(NUM_FRAMES):
        touched = set()
        while ev_i < len(frames_of_events) and frames_of_events[ev_i] == f:
            queue.append(kinds[ev_i])
            ev_i += 1
        carried = []
        # the first frame of a segment never carries an event
        for wanted in (queue if f % FRAMES_PER_SEGMENT else []):
            occupied = set(visible.values())
            order = [wanted] + [x for x in ("move", "appear", "disappear") if x != wanted]
            done = False
            for kind in order:
                if kind == "appear" and pending:
                    free = [c for c in range(grid * grid) if divmod(c, grid) not in occupied]
                    if not free:
                        continue
                    eid = pending.pop(int(rng.integers(len(pending))))
                    visible[eid] = divmod(int(free[rng.integers(len(free))]), grid)
                    first_pos[eid] = visible[eid]
                    events.append(MotionEvent(eid, "appear", f))
                elif kind == "disappear":
                    cands = [e for e in sorted(visible) if e not in touched]
                    # keep at least one entity on screen so counts stay readable
                    if len(visible) <= 1 or not cands:
                        continue
                    eid = cands[int(rng.integers(len(cands)))]
                    del visible[eid]
                    events.append(MotionEvent(eid, "disappear", f))
                elif kind == "move":
                    moves = []
                    for eid in sorted(visible):
                        if eid in touched:
                            continue
                        r, c = visible[eid]
                        for mk, (dr, dc) in MOVE_DELTA.items():
                            rr, cc = r + dr, c + dc
                            if 0 <= rr < grid and 0 <= cc < grid and (rr, cc) not in occupied:
                                moves.append((eid, mk, (rr, cc)))
                    if not moves:
                        continue
                    eid, mk, dest = moves[int(rng.integers(len(moves)))]
                    visible[eid] = dest
                    events.append(MotionEvent(eid, mk, f))
                else:
                    continue
                touched.add(eid)
                done = True
                break
            if not done:
                # an entity changes at most once per frame; retry at the next event frame
                carried.append(wanted)
        if f % FRAMES_PER_SEGMENT:
            queue = carried
        positions.append(dict(visible))
    if pending or queue:
        raise GenerationError("events could not all be placed")
    entities = [Entity(eid, looks[eid][0], looks[eid][1], first_pos[eid]) for eid in range(n_entities)]
    return entities, events, positions


def generate_clip(seed, richness_range=(1, RICHNESS_CEILING), grid=8, clip_id=None,
                  ceiling=RICHNESS_CEILING, max_attempts=50):
    lo, hi = richness_range
    if lo < 1 or hi < lo or hi > ceiling:
        raise GenerationError(f"richness range {richness_range} outside [1, {ceiling}]")
    rng = np.random.default_rng(seed)
    richness = int(rng.integers(lo, hi + 1))
    max_entities = min(len(SHAPES) * len(COLORS), grid * grid)
    n_events = int(rng.integers(0, (richness - 1) // EVENT_WEIGHT + 1))
    n_entities = richness - EVENT_WEIGHT * n_events
    if n_entities > max_entities:
        # shift weight from entities to events while staying on the same richness
        n_entities = max_entities - (richness - max_entities) % EVENT_WEIGHT
        n_events = (richness - n_entities) // EVENT_WEIGHT
        if n_entities < 1:
            raise GenerationError(f"richness {richness} infeasible on a {grid}x{grid} grid")
    for _ in range(max_attempts):
        try:
            entities, events, positions = _simulate(rng, grid, n_entities, n_events)
            break
        except GenerationError:
            continue
    else:
        raise GenerationError(f"could not realise richness {richness} on a {grid}x{grid} grid")
    clip = Clip(
        clip_id=clip_id if clip_id is not None else f"clip-{seed}",
        grid=grid,
        frames=_render(grid, positions, entities),
        entities=entities,
        events=events,
        richness=n_entities + EVENT_WEIGHT * len(events),
        positions=positions,
    )
    assert clip.richness == richness
    return clip
