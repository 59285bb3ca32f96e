"""Synthetic pixel-control tasks with task-irrelevant distractor backgrounds.

Two built-in tasks share one rendering pipeline:

* ``point_mass`` -- dense reach: a disc must move onto a square goal.
* ``catch`` -- sparse: a cup (disc) must be under a falling ball (square)
  when the ball lands.

The hidden ground state is rendered as an agent disc and a goal square drawn
over a background frame.  The background is either solid black, a procedural
stream of translating rectangles, or a directory of PNG frames played
sequentially.  Nothing in the background influences dynamics or reward.
"""

from __future__ import annotations

import dataclasses
import math
from collections import deque
from pathlib import Path
from typing import Optional

import numpy as np

from replab.errors import ConfigError, UsageError, ValidationError

DISTRACTOR_MODES = ("none", "procedural", "frame_directory")
LAYOUTS = ("centered", "off-center", "zoomed-out")

AGENT_COLOR = np.array([230, 60, 60], dtype=np.uint8)
GOAL_COLOR = np.array([60, 230, 60], dtype=np.uint8)
BACKGROUND_COLOR = np.array([0, 0, 0], dtype=np.uint8)

BASE_AGENT_RADIUS = 4.0
GOAL_SIZE = 6
STEP_SCALE = 0.1
CUP_HEIGHT = -0.85
CATCH_RADIUS = 0.2


@dataclasses.dataclass
class GroundState:
    """True (hidden) state.

    For ``point_mass`` ``position``/``velocity``/``goal`` are 2-vectors.  For
    ``catch`` ``position`` holds the cup x-coordinate, ``ball`` the ball (x, y)
    and ``velocity`` is None.
    """

    position: np.ndarray
    goal: Optional[np.ndarray]
    step_index: int = 0
    velocity: Optional[np.ndarray] = None
    ball: Optional[np.ndarray] = None

    def copy(self) -> "GroundState":
        return GroundState(
            position=self.position.copy(),
            goal=None if self.goal is None else self.goal.copy(),
            step_index=self.step_index,
            velocity=None if self.velocity is None else self.velocity.copy(),
            ball=None if self.ball is None else self.ball.copy(),
        )

    def glyphs(self):
        """World coordinates of the agent disc and of the goal square."""
        if self.ball is not None:
            return (float(self.position[0]), CUP_HEIGHT), (float(self.ball[0]), float(self.ball[1]))
        return (
            (float(self.position[0]), float(self.position[1])),
            (float(self.goal[0]), float(self.goal[1])),
        )


@dataclasses.dataclass
class EmissionConfig:
    distractor_mode: str = "none"
    layout: str = "centered"
    render_size: int = 64
    agent_scale: float = 1.0
    action_repeat: int = 4
    frame_stack: int = 3
    frame_dir: Optional[str] = None
    procedural_frames: int = 500

    def __post_init__(self):
        if self.distractor_mode not in DISTRACTOR_MODES:
            raise ConfigError(f"distractor_mode must be one of {DISTRACTOR_MODES}, got {self.distractor_mode!r}")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if int(self.action_repeat) < 1:
            raise ConfigError("action_repeat must be >= 1")
        if not 0.0 < float(self.agent_scale) <= 1.0:
            raise ConfigError("agent_scale must lie in (0, 1]")
        if int(self.render_size) < 16:
            raise ConfigError("render_size must be >= 16")
        if int(self.frame_stack) < 1:
            raise ConfigError("frame_stack must be >= 1")
        if int(self.procedural_frames) < 1:
            raise ConfigError("procedural_frames must be >= 1")

    @property
    def effective_scale(self) -> float:
        # off-center and zoomed-out both shrink the agent by half
        return self.agent_scale * (1.0 if self.layout == "centered" else 0.5)

    @property
    def agent_radius(self) -> float:
        return BASE_AGENT_RADIUS * self.effective_scale

    def arena(self):
        """Pixel box ``(x_lo, x_hi, y_lo, y_hi)`` onto which world [-1, 1]^2 maps."""
        n = self.render_size - 1
        if self.layout == "centered":
            return 0.25 * n, 0.75 * n, 0.25 * n, 0.75 * n
        if self.layout == "zoomed-out":
            return 0.375 * n, 0.625 * n, 0.375 * n, 0.625 * n
        r = self.agent_radius
        return r, n / 3.0, 0.25 * n, 0.75 * n


def world_to_pixel(xy, emission: EmissionConfig):
    """Map world (x, y) to continuous pixel (col, row); world y points up."""
    x_lo, x_hi, y_lo, y_hi = emission.arena()
    col = x_lo + (xy[0] + 1.0) / 2.0 * (x_hi - x_lo)
    row = y_lo + (1.0 - (xy[1] + 1.0) / 2.0) * (y_hi - y_lo)
    return col, row


def _disc_mask(size, center, radius):
    rows, cols = np.ogrid[:size, :size]
    col, row = center
    return (rows - row) ** 2 + (cols - col) ** 2 <= radius**2


def _square_mask(size, center):
    col, row = center
    c0 = int(round(col)) - GOAL_SIZE // 2
    r0 = int(round(row)) - GOAL_SIZE // 2
    mask = np.zeros((size, size), dtype=bool)
    mask[max(r0, 0) : max(r0 + GOAL_SIZE, 0), max(c0, 0) : max(c0 + GOAL_SIZE, 0)] = True
    return mask


def glyph_masks(ground: GroundState, emission: EmissionConfig):
    agent_xy, goal_xy = ground.glyphs()
    size = emission.render_size
    disc = _disc_mask(size, world_to_pixel(agent_xy, emission), emission.agent_radius)
    square = _square_mask(size, world_to_pixel(goal_xy, emission))
    return disc, square


def relevance_mask(ground: GroundState, emission: EmissionConfig) -> np.ndarray:
    """Binary (H, W) uint8 image: 1 on agent-disc and goal-square pixels."""
    disc, square = glyph_masks(ground, emission)
    return (disc | square).astype(np.uint8)


def render(ground: GroundState, emission: EmissionConfig, frame: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw the goal square and agent disc over ``frame`` (black if None)."""
    size = emission.render_size
    if frame is None:
        image = np.empty((size, size, 3), dtype=np.uint8)
        image[:] = BACKGROUND_COLOR
    else:
        frame = np.asarray(frame)
        if frame.shape != (size, size, 3):
            raise ValidationError(f"distractor frame shape {frame.shape} does not match render size {size}")
        image = frame.astype(np.uint8, copy=True)
    disc, square = glyph_masks(ground, emission)
    image[square] = GOAL_COLOR
    image[disc] = AGENT_COLOR
    return image


class DistractorStream:
    """Sequential, wrapping source of background frames.

    Procedural mode draws ``K = 3`` colored rectangles over a seeded base
    color; each rectangle translates by a fixed integer velocity per frame,
    modulo the frame size.  Directory mode plays sorted PNG files starting at
    a seeded offset.
    """

    n_rects = 3

    def __init__(self, size: int, seed: int, mode: str = "procedural", frame_dir=None, n_frames: int = 500):
        self.size = int(size)
        self.mode = mode
        self.cursor = 0
        rng = np.random.default_rng(seed)
        if mode == "procedural":
            self.n_frames = int(n_frames)
            self.base_color = rng.integers(0, 256, size=3).astype(np.uint8)
            self.rect_colors = rng.integers(0, 256, size=(self.n_rects, 3)).astype(np.uint8)
            self.rect_sizes = rng.integers(self.size // 6, self.size // 2, size=(self.n_rects, 2))
            self.rect_origins = rng.integers(0, self.size, size=(self.n_rects, 2))
            velocities = rng.integers(1, 4, size=(self.n_rects, 2))
            signs = rng.choice([-1, 1], size=(self.n_rects, 2))
            self.rect_velocities = velocities * signs
        elif mode == "frame_directory":
            self.files = list_frame_files(frame_dir)
            self.n_frames = len(self.files)
            self.cursor = int(rng.integers(self.n_frames))
            self._cache = {}
        else:
            raise ConfigError(f"distractor stream mode {mode!r} is not a frame source")

    def rect_positions(self, index: int) -> np.ndarray:
        """Top-left (x, y) of each rectangle in frame ``index``."""
        return (self.rect_origins + self.rect_velocities * index) % self.size

    def frame(self, index: int) -> np.ndarray:
        index = index % self.n_frames
        if self.mode == "frame_directory":
            if index not in self._cache:
                self._cache[index] = load_frame(self.files[index], self.size)
            return self._cache[index].copy()
        image = np.empty((self.size, self.size, 3), dtype=np.uint8)
        image[:] = self.base_color
        for (x, y), (w, h), color in zip(self.rect_positions(index), self.rect_sizes, self.rect_colors):
            rows = (y + np.arange(h)) % self.size
            cols = (x + np.arange(w)) % self.size
            image[np.ix_(rows, cols)] = color
        return image

    def advance(self) -> np.ndarray:
        frame = self.frame(self.cursor)
        self.cursor = (self.cursor + 1) % self.n_frames
        return frame


def advance_distractor(stream: DistractorStream) -> np.ndarray:
    return stream.advance()


def list_frame_files(frame_dir):
    if frame_dir is None:
        raise ConfigError("frame_directory mode requires frame_dir")
    path = Path(frame_dir)
    if not path.is_dir():
        raise ConfigError(f"frame directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ConfigError(f"frame directory {path} contains no PNG files")
    return files


def load_frame(path, size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8).copy()


@dataclasses.dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


class PixelEnv:
    """Base class for frame-stacked pixel environments.

    External suites can be adapted by subclassing and implementing
    ``_sample_ground``, ``_inner_step`` and ``action_dim``; everything else
    (emission, stacking, action repeat, validation) is shared.
    """

    action_dim = 2
    name = "pixel_env"

    def __init__(self, emission: Optional[EmissionConfig] = None, episode_length: int = 200):
        self.emission = emission or EmissionConfig()
        self.episode_length = int(episode_length)
        if self.episode_length < 1:
            raise ConfigError("episode_length must be >= 1")
        if self.emission.distractor_mode == "frame_directory":
            list_frame_files(self.emission.frame_dir)
        self.ground: Optional[GroundState] = None
        self.stream: Optional[DistractorStream] = None
        self._frames: deque = deque(maxlen=self.emission.frame_stack)
        self._masks: deque = deque(maxlen=self.emission.frame_stack)
        self._done = True
        self._seed = None

    @property
    def observation_shape(self):
        e = self.emission
        return (e.render_size, e.render_size, 3 * e.frame_stack)

    @property
    def max_return(self) -> float:
        raise NotImplementedError

    def reset(self, seed: int):
        if seed < 0:
            raise ValidationError("seed must be >= 0")
        self._seed = int(seed)
        rng = np.random.default_rng(seed)
        self.ground = self._sample_ground(rng)
        e = self.emission
        if e.distractor_mode == "none":
            self.stream = None
        else:
            self.stream = DistractorStream(
                e.render_size,
                seed=int(rng.integers(2**31)),
                mode=e.distractor_mode,
                frame_dir=e.frame_dir,
                n_frames=e.procedural_frames,
            )
        first = self._render_next()
        self._frames.clear()
        first_mask = relevance_mask(self.ground, e)
        for _ in range(e.frame_stack):
            self._frames.append(first)
            self._masks.append(first_mask)
        self._done = False
        return self.observation(), self.ground.copy()

    def observation(self) -> np.ndarray:
        return np.concatenate(list(self._frames), axis=-1)

    def mask_stack(self) -> np.ndarray:
        """Relevance masks aligned with the stacked frames, shape (H, W, k)."""
        return np.stack(list(self._masks), axis=-1)

    def _render_next(self):
        frame = None if self.stream is None else self.stream.advance()
        self._last_frame = frame
        return render(self.ground, self.emission, frame)

    def validate_action(self, action) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.action_dim,):
            raise ValidationError(f"action must have {self.action_dim} components, got {action.shape[0]}")
        if not np.all(np.isfinite(action)) or np.any(np.abs(action) > 1.0):
            raise ValidationError(f"action components must lie in [-1, 1], got {action.tolist()}")
        return action

    def step(self, action) -> StepResult:
        if self._done:
            raise UsageError("step() called on a finished episode; call reset() first")
        action = self.validate_action(action)
        total = 0.0
        terminal = False
        for _ in range(self.emission.action_repeat):
            reward, terminal = self._inner_step(action)
            total += reward
            frame = self._render_next()
            if terminal:
                break
        self._frames.append(frame)
        mask = relevance_mask(self.ground, self.emission)
        self._masks.append(mask)
        self.ground.step_index += 1
        truncated = not terminal and self.ground.step_index >= self.episode_length
        self._done = terminal or truncated
        info = {
            "ground": self.ground.copy(),
            "mask": mask,
            "mask_stack": self.mask_stack(),
            "terminal": terminal,
            "truncated": truncated,
        }
        return StepResult(self.observation(), float(total), self._done, info)

    def _sample_ground(self, rng) -> GroundState:
        raise NotImplementedError

    def _inner_step(self, action):
        raise NotImplementedError


class PointMassEnv(PixelEnv):
    """Dense reach task: reward per inner step is ``1 - dist / (2 sqrt 2)``."""

    action_dim = 2
    name = "point_mass"

    @property
    def max_return(self) -> float:
        return float(self.episode_length * self.emission.action_repeat)

    def _sample_ground(self, rng):
        return GroundState(
            position=rng.uniform(-1.0, 1.0, size=2),
            goal=rng.uniform(-1.0, 1.0, size=2),
            velocity=np.zeros(2),
        )

    def _inner_step(self, action):
        g = self.ground
        old = g.position
        g.position = np.clip(old + STEP_SCALE * action, -1.0, 1.0)
        g.velocity = g.position - old
        return point_mass_reward(g.position, g.goal), False


def point_mass_reward(position, goal) -> float:
    return 1.0 - float(np.linalg.norm(np.asarray(position) - np.asarray(goal))) / (2.0 * math.sqrt(2.0))


class CatchEnv(PixelEnv):
    """Sparse catch: reward 1 on the landing step iff the cup is under the ball.

    The ball falls at a constant speed chosen so it lands on the last inner
    step of the episode; the episode then terminates.
    """

    action_dim = 1
    name = "catch"

    def __init__(self, emission: Optional[EmissionConfig] = None, episode_length: int = 20):
        super().__init__(emission, episode_length)
        self.fall_speed = (1.0 - CUP_HEIGHT) / (self.episode_length * self.emission.action_repeat)

    @property
    def max_return(self) -> float:
        return 1.0

    def _sample_ground(self, rng):
        return GroundState(
            position=rng.uniform(-1.0, 1.0, size=1),
            goal=None,
            ball=np.array([rng.uniform(-1.0, 1.0), 1.0]),
        )

    def _inner_step(self, action):
        g = self.ground
        g.position = np.clip(g.position + STEP_SCALE * action, -1.0, 1.0)
        g.ball = np.array([g.ball[0], g.ball[1] - self.fall_speed])
        if g.ball[1] <= CUP_HEIGHT + 1e-9:
            g.ball[1] = CUP_HEIGHT
            caught = abs(float(g.position[0]) - float(g.ball[0])) <= CATCH_RADIUS
            return (1.0 if caught else 0.0), True
        return 0.0, False


TASKS = {"point_mass": PointMassEnv, "catch": CatchEnv}


def make_env(task: str, emission: Optional[EmissionConfig] = None, episode_length: Optional[int] = None) -> PixelEnv:
    try:
        cls = TASKS[task]
    except KeyError:
        raise ConfigError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None
    if episode_length is None:
        return cls(emission)
    return cls(emission, episode_length)
