"""
EEG Structures - Estruturas de dados para o pipeline de decodificação

Define os tipos compartilhados por todos os módulos: gravações contínuas,
marcadores de evento, rótulos de condição, conjuntos de trials e a
hierarquia de exceções usada pela CLI para escolher códigos de saída.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np


class DecodingError(Exception):
    """Base de todos os erros do pipeline."""


class ContainerFormatError(DecodingError, ValueError):
    """Header ou payload de container inválido."""


class SignalShapeError(DecodingError, ValueError):
    """Formas, taxas de amostragem ou janelas incompatíveis."""


class FilterDesignError(DecodingError, ValueError):
    """Parâmetros de filtro inválidos."""


class SingleClassError(DecodingError, ValueError):
    """Operação exige as duas classes presentes."""


class ModelFitError(DecodingError):
    """Falha numérica durante ajuste ou avaliação."""


class StatisticsError(DecodingError, ValueError):
    """Entrada insuficiente ou degenerada para um teste estatístico."""


class ConfigurationError(DecodingError, ValueError):
    """Configuração ou flag inválida."""


class Outcome(Enum):
    """Resultado da ação do robô."""
    ERROR = "error"
    CORRECT = "correct"


class Robot(Enum):
    """Tipo de robô observado."""
    NAO = "nao"
    NOHU = "nohu"


class DecodingTask(Enum):
    """Problemas binários de decodificação."""
    ERROR_VS_CORRECT = "error_vs_correct"
    NAO_VS_NOHU = "nao_vs_nohu"


@dataclass(frozen=True)
class ConditionLabel:
    """Par de atributos de cada trial."""
    outcome: Outcome
    robot: Robot

    def class_index(self, task: DecodingTask) -> int:
        """Projeta o par no índice binário da tarefa."""
        if task == DecodingTask.ERROR_VS_CORRECT:
            return 1 if self.outcome == Outcome.ERROR else 0
        return 1 if self.robot == Robot.NOHU else 0

    def to_dict(self) -> Dict[str, str]:
        return {"outcome": self.outcome.value, "robot": self.robot.value}


@dataclass(frozen=True)
class EventMarker:
    """Onset de estímulo com o rótulo de condição."""
    sample_index: int
    condition: ConditionLabel

    def to_dict(self) -> Dict[str, Any]:
        return {"sample_index": int(self.sample_index), **self.condition.to_dict()}


@dataclass(frozen=True, eq=False)
class Recording:
    """Sinal contínuo multicanal em microvolts."""
    data: np.ndarray
    sample_rate_hz: float
    channel_names: Tuple[str, ...]
    events: Tuple[EventMarker, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data).view()
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise SignalShapeError(f"recording data must be [n_channels x n_samples], got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        object.__setattr__(self, "events", tuple(self.events))

        if not self.sample_rate_hz > 0:
            raise SignalShapeError(f"invalid sample rate: {self.sample_rate_hz}")
        if len(self.channel_names) != data.shape[0]:
            raise SignalShapeError(
                f"{len(self.channel_names)} channel names for {data.shape[0]} channels"
            )
        if len(set(self.channel_names)) != len(self.channel_names):
            raise SignalShapeError("channel names must be unique")
        for k, event in enumerate(self.events):
            if not 0 <= event.sample_index < data.shape[1]:
                raise SignalShapeError(
                    f"event {k} at sample {event.sample_index} outside [0, {data.shape[1]})"
                )

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def with_data(self, data: np.ndarray, sample_rate_hz: Optional[float] = None,
                  events: Optional[Sequence[EventMarker]] = None) -> "Recording":
        """Cópia com novo sinal (e opcionalmente nova taxa/eventos)."""
        return replace(
            self,
            data=data,
            sample_rate_hz=self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz,
            events=self.events if events is None else tuple(events),
        )

    def summary(self) -> Dict[str, Any]:
        return {
            "n_channels": self.n_channels,
            "n_samples": self.n_samples,
            "sample_rate_hz": self.sample_rate_hz,
            "n_events": len(self.events),
        }


@dataclass(frozen=True, eq=False)
class TrialSet:
    """Trials epocados [n_trials x n_channels x n_timepoints] com rótulos binários."""
    trials: np.ndarray
    labels: np.ndarray
    sample_rate_hz: float
    interval: Tuple[float, float]
    conditions: Tuple[ConditionLabel, ...] = ()
    channel_names: Tuple[str, ...] = ()
    event_indices: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        trials = np.asarray(self.trials).view()
        labels = np.array(self.labels, dtype=np.int64)
        if trials.ndim != 3:
            raise SignalShapeError(f"trials must be 3-D, got shape {trials.shape}")
        if labels.shape != (trials.shape[0],):
            raise SignalShapeError(f"{labels.shape[0]} labels for {trials.shape[0]} trials")
        if np.any((labels != 0) & (labels != 1)):
            raise SignalShapeError("labels must be binary (0/1)")
        t_start, t_end = self.interval
        if not t_start < t_end:
            raise SignalShapeError(f"interval start must precede end: {self.interval}")
        expected = int(round((t_end - t_start) * self.sample_rate_hz))
        if trials.shape[2] != expected:
            raise SignalShapeError(
                f"{trials.shape[2]} timepoints, interval {self.interval} at "
                f"{self.sample_rate_hz} Hz implies {expected}"
            )
        if self.conditions and len(self.conditions) != trials.shape[0]:
            raise SignalShapeError("one condition label per trial required")
        trials.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "trials", trials)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "interval", (float(t_start), float(t_end)))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        object.__setattr__(self, "event_indices", tuple(int(i) for i in self.event_indices))

    @property
    def n_trials(self) -> int:
        return self.trials.shape[0]

    @property
    def n_channels(self) -> int:
        return self.trials.shape[1]

    @property
    def n_timepoints(self) -> int:
        return self.trials.shape[2]

    def class_counts(self) -> Tuple[int, int]:
        n1 = int(self.labels.sum())
        return self.n_trials - n1, n1

    def require_both_classes(self, context: str = "fit") -> None:
        n0, n1 = self.class_counts()
        if n0 == 0 or n1 == 0:
            raise SingleClassError(f"{context} requires both classes, got counts {n0}/{n1} (single class)")

    def subset(self, indices: Sequence[int]) -> "TrialSet":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            trials=self.trials[idx],
            labels=self.labels[idx],
            conditions=tuple(self.conditions[i] for i in idx) if self.conditions else (),
            event_indices=tuple(self.event_indices[i] for i in idx) if self.event_indices else (),
        )

    def with_trials(self, trials: np.ndarray) -> "TrialSet":
        return replace(self, trials=trials)


def project_labels(ts: TrialSet, task: DecodingTask, robot: Optional[Robot] = None) -> TrialSet:
    """Define os rótulos binários de acordo com a tarefa escolhida.

    Para ERROR_VS_CORRECT um filtro de robô opcional restringe o conjunto a
    um único robô; os dados dos trials nunca são modificados.
    """
    if not ts.conditions:
        raise ConfigurationError("trial set carries no condition labels to project")

    keep = list(range(ts.n_trials))
    if task == DecodingTask.ERROR_VS_CORRECT and robot is not None:
        keep = [i for i, cond in enumerate(ts.conditions) if cond.robot == robot]

    selected = ts.subset(keep) if len(keep) != ts.n_trials else ts
    labels = np.array([cond.class_index(task) for cond in selected.conditions], dtype=np.int64)
    projected = replace(selected, labels=labels)
    projected.require_both_classes(f"task {task.value}")
    return projected
