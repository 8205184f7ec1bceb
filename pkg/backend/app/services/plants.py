"""Built-in continuous-time plants, RK4 integration and test-signal generation.

The plants are synthetic stand-ins used to exercise the training strategies
without laboratory hardware. The ``valve`` plant is non-physical: it only mimics
a pressure chamber filled and vented by two inputs that drives a spring-returned
plunger with saturation.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from app.core.rng import make_rng
from app.services.dataset import Dataset, Trajectory
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

Drift = Callable[[np.ndarray, np.ndarray], np.ndarray]
OutputMap = Callable[[np.ndarray, np.ndarray], np.ndarray]

SIGNAL_KINDS = ("static", "steps", "ramp", "chirp")


class UnknownPlantError(KeyError):
    """Raised for a plant name missing from the registry."""

    def __init__(self, name: str, registered: Sequence[str]):
        super().__init__(
            f"unknown plant '{name}', registered plants: {', '.join(registered)}"
        )
        self.name = name
        self.registered = list(registered)


class PlantDivergenceError(RuntimeError):
    """Raised when the integrated state leaves its configured bound."""

    def __init__(self, step: int, bound: float):
        super().__init__(f"plant state diverged at step {step} (|x| > {bound})")
        self.step = step
        self.bound = bound


class PlantSpec(BaseModel):
    """Sampling, initial-condition and input settings of a registered plant."""

    model_config = ConfigDict(extra="forbid")

    name: str
    state_dim: int = Field(ge=1)
    input_dim: int = Field(ge=1)
    output_dim: int = Field(ge=1)
    sampling_time: float = Field(gt=0)
    integration_step: float = Field(gt=0)
    x0_low: List[float]
    x0_high: List[float]
    input_low: List[float]
    input_high: List[float]
    state_bound: float = Field(1e6, gt=0)
    output_noise_std: float = Field(0.0, ge=0)
    input_names: List[str]
    output_names: List[str]
    units: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_consistency(self) -> "PlantSpec":
        if self.integration_step > self.sampling_time:
            raise ValueError("integration step must not exceed the sampling time")
        if not len(self.x0_low) == len(self.x0_high) == self.state_dim:
            raise ValueError("initial-condition bounds must match state_dim")
        if not len(self.input_low) == len(self.input_high) == self.input_dim:
            raise ValueError("input limits must match input_dim")
        if len(self.input_names) != self.input_dim:
            raise ValueError("input_names must match input_dim")
        if len(self.output_names) != self.output_dim:
            raise ValueError("output_names must match output_dim")
        if any(lo > hi for lo, hi in zip(self.input_low, self.input_high)):
            raise ValueError("input_low must not exceed input_high")
        return self

    @property
    def input_limits(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.input_low), np.asarray(self.input_high)


@dataclass(frozen=True)
class RegisteredPlant:
    spec: PlantSpec
    drift: Drift
    output: OutputMap
    description: str


def _valve_drift(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    pressure, position = x
    fill, vent = u
    dp = 4.0 * fill * (1.0 - pressure) - 3.0 * vent * pressure - 0.2 * pressure
    # plunger target saturates once pressure overcomes the spring preload
    target = 0.5 * (1.0 + math.tanh((pressure - 0.45) / 0.12))
    ds = (target - position) / 0.15
    return np.array([dp, ds])


def _linear1_drift(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return -x + u


def _oscillator_drift(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.array([x[1], -x[0] + u[0]])


def _identity_output(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return x.copy()


def _first_state(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return x[:1].copy()


PLANT_REGISTRY: Dict[str, RegisteredPlant] = {
    "valve": RegisteredPlant(
        spec=PlantSpec(
            name="valve",
            state_dim=2,
            input_dim=2,
            output_dim=2,
            sampling_time=0.05,
            integration_step=0.01,
            x0_low=[0.0, 0.0],
            x0_high=[1.0, 1.0],
            input_low=[0.0, 0.0],
            input_high=[1.0, 1.0],
            state_bound=10.0,
            output_noise_std=0.01,
            input_names=["u1", "u2"],
            output_names=["p", "s"],
            units={"u1": "V", "u2": "V", "p": "-", "s": "-"},
        ),
        drift=_valve_drift,
        output=_identity_output,
        description="non-physical valve-like plant: chamber pressure p, plunger s",
    ),
    "linear1": RegisteredPlant(
        spec=PlantSpec(
            name="linear1",
            state_dim=1,
            input_dim=1,
            output_dim=1,
            sampling_time=0.1,
            integration_step=0.01,
            x0_low=[-1.0],
            x0_high=[1.0],
            input_low=[-1.0],
            input_high=[1.0],
            input_names=["u"],
            output_names=["y"],
        ),
        drift=_linear1_drift,
        output=_identity_output,
        description="first-order linear plant dx/dt = -x + u, y = x",
    ),
    "oscillator": RegisteredPlant(
        spec=PlantSpec(
            name="oscillator",
            state_dim=2,
            input_dim=1,
            output_dim=1,
            sampling_time=0.1,
            integration_step=0.01,
            x0_low=[-1.0, -1.0],
            x0_high=[1.0, 1.0],
            input_low=[-0.5],
            input_high=[0.5],
            input_names=["u"],
            output_names=["x1"],
        ),
        drift=_oscillator_drift,
        output=_first_state,
        description="undamped forced harmonic oscillator, y = position",
    ),
}


def registered_plants() -> List[str]:
    return sorted(PLANT_REGISTRY)


def get_plant(name: str) -> RegisteredPlant:
    try:
        return PLANT_REGISTRY[name]
    except KeyError:
        raise UnknownPlantError(name, registered_plants()) from None


def rk4_step(drift: Drift, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    """One classic fourth-order Runge-Kutta step with u held constant."""
    k1 = drift(x, u)
    k2 = drift(x + 0.5 * h * k1, u)
    k3 = drift(x + 0.5 * h * k2, u)
    k4 = drift(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate_ode(
    drift: Drift,
    output: OutputMap,
    u: np.ndarray,
    x0: Sequence[float],
    sampling_time: float,
    n: int,
    integration_step: float,
    state_bound: float = 1e6,
    traj_id: str = "sim",
) -> Trajectory:
    """
    Integrate dx/dt = f(x, u) under zero-order hold and sample y = g(x, u).

    Args:
        drift: State derivative f(x, u)
        output: Output map g(x, u)
        u: Inputs (n x input_dim), held constant over each sampling interval
        x0: Initial state at t = 0
        sampling_time: T_s
        n: Number of samples (y_0 is g(x0, u_0))
        integration_step: Upper bound on the RK4 step; each interval is split into
            an integer number of equal steps
        state_bound: Largest allowed |x| before the run is declared divergent
        traj_id: Identifier of the resulting trajectory

    Returns:
        Sampled trajectory of length n
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[0] < n:
        raise ValueError(f"inputs cover {u.shape[0]} samples, {n} required")
    substeps = max(1, math.ceil(sampling_time / integration_step - 1e-9))
    h = sampling_time / substeps

    x = np.array(x0, dtype=np.float64)
    outputs = []
    for i in range(n):
        outputs.append(np.atleast_1d(output(x, u[i])))
        if i == n - 1:
            break
        for _ in range(substeps):
            x = rk4_step(drift, x, u[i], h)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > state_bound:
            raise PlantDivergenceError(i + 1, state_bound)

    return Trajectory(
        id=traj_id,
        sampling_time=sampling_time,
        inputs=u[:n],
        outputs=np.array(outputs),
    )


def integrate_plant(
    plant: Union[str, PlantSpec],
    u: np.ndarray,
    x0: Sequence[float],
    sampling_time: Optional[float] = None,
    n: Optional[int] = None,
    traj_id: str = "sim",
) -> Trajectory:
    """Integrate a registered plant; ``plant`` may be a name or a PlantSpec."""
    spec = get_plant(plant).spec if isinstance(plant, str) else plant
    registered = get_plant(spec.name)
    sampling_time = spec.sampling_time if sampling_time is None else sampling_time
    if spec.integration_step > sampling_time:
        raise ValueError("integration step must not exceed the sampling time")
    return simulate_ode(
        registered.drift,
        registered.output,
        u,
        x0,
        sampling_time,
        len(u) if n is None else n,
        spec.integration_step,
        spec.state_bound,
        traj_id,
    )


def _section_signal(
    kind: str, length: int, low: float, high: float, rng: np.random.Generator
) -> np.ndarray:
    if kind == "static":
        return np.full(length, rng.uniform(low, high))
    if kind == "steps":
        values = np.empty(length)
        position = 0
        longest = max(3, length // 3)
        while position < length:
            hold = int(rng.integers(3, longest + 1))
            values[position : position + hold] = rng.uniform(low, high)
            position += hold
        return values
    if kind == "ramp":
        return np.linspace(rng.uniform(low, high), rng.uniform(low, high), length)
    if kind == "chirp":
        center = rng.uniform(low, high)
        amplitude = rng.uniform(0.2, 1.0) * (high - low) / 2.0
        f_start, f_end = rng.uniform(0.005, 0.1, size=2)
        phase = 2.0 * np.pi * np.cumsum(np.linspace(f_start, f_end, length))
        return center + amplitude * np.sin(phase + rng.uniform(0, 2 * np.pi))
    raise ValueError(f"unknown signal kind '{kind}', expected one of {SIGNAL_KINDS}")


def generate_test_signal(
    limits: Tuple[Sequence[float], Sequence[float]],
    n: int,
    sections: int,
    rng: np.random.Generator,
    kinds: Sequence[str] = SIGNAL_KINDS,
) -> np.ndarray:
    """
    Random input signal alternating static holds and dynamic sections.

    Each channel is split into ``sections`` contiguous sections of random length;
    every section is a constant hold, a sequence of random steps, a ramp or a
    chirp, and the result is clamped to the channel limits.

    Returns:
        Array of shape (n, channels)
    """
    low, high = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in limits)
    sections = max(1, min(sections, n))
    signal = np.empty((n, low.size))
    for channel in range(low.size):
        cuts = np.sort(rng.choice(np.arange(1, n), size=sections - 1, replace=False))
        bounds = [0, *cuts.tolist(), n]
        for start, stop in zip(bounds[:-1], bounds[1:]):
            kind = kinds[int(rng.integers(len(kinds)))]
            signal[start:stop, channel] = _section_signal(
                kind, stop - start, low[channel], high[channel], rng
            )
    return np.clip(signal, low, high)


def _synthesize(
    spec: PlantSpec,
    registered: RegisteredPlant,
    count: int,
    length: int,
    sequence: np.random.SeedSequence,
    prefix: str,
) -> List[Trajectory]:
    limits = spec.input_limits
    trajectories = []
    for position, child in enumerate(sequence.spawn(count)):
        rng = make_rng(child)
        u = generate_test_signal(limits, length, max(2, length // 50), rng)
        x0 = rng.uniform(spec.x0_low, spec.x0_high)
        traj = simulate_ode(
            registered.drift,
            registered.output,
            u,
            x0,
            spec.sampling_time,
            length,
            spec.integration_step,
            spec.state_bound,
            f"{prefix}_{position:04d}",
        )
        if spec.output_noise_std > 0:
            noisy = traj.outputs + rng.normal(0.0, spec.output_noise_std, traj.outputs.shape)
            traj = Trajectory(traj.id, traj.sampling_time, traj.inputs, noisy)
        trajectories.append(traj)
    return trajectories


def make_synthetic_benchmark(
    plant: Union[str, PlantSpec],
    n_train_traj: int = 60,
    train_len: int = 200,
    n_test_traj: int = 10,
    test_len: int = 1000,
    seed: int = 0,
) -> Tuple[Dataset, Dataset]:
    """
    Generate train and test datasets from a registered plant.

    Train and test draw from the two children of ``SeedSequence(seed)``, and every
    trajectory from its own grandchild, so the streams never overlap.
    """
    if test_len <= train_len:
        raise ValueError(
            f"test trajectories ({test_len}) must be longer than training "
            f"trajectories ({train_len})"
        )
    spec = get_plant(plant).spec if isinstance(plant, str) else plant
    registered = get_plant(spec.name)
    train_sequence, test_sequence = np.random.SeedSequence(seed).spawn(2)

    datasets = []
    for role, count, length, sequence in (
        ("train", n_train_traj, train_len, train_sequence),
        ("test", n_test_traj, test_len, test_sequence),
    ):
        trajectories = _synthesize(spec, registered, count, length, sequence, role)
        datasets.append(
            Dataset(
                trajectories=tuple(trajectories),
                role=role,
                input_names=tuple(spec.input_names),
                output_names=tuple(spec.output_names),
                units=dict(spec.units),
            )
        )
    logger.info(
        f"Generated '{spec.name}' benchmark: {n_train_traj}x{train_len} train, "
        f"{n_test_traj}x{test_len} test (seed {seed})"
    )
    return datasets[0], datasets[1]
