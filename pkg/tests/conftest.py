"""Shared fixtures: the runtime modules use bare sibling imports from app/."""

import sys
from pathlib import Path

import numpy as np
import pytest

APP_DIR = Path(__file__).resolve().parent.parent / "app"
if str(APP_DIR) not in sys.path:
    sys.path.insert(0, str(APP_DIR))

from eeg_structures import ConditionLabel, EventMarker, Outcome, Recording, Robot, TrialSet  # noqa: E402


FOUR_CONDITIONS = (
    ConditionLabel(Outcome.ERROR, Robot.NAO),
    ConditionLabel(Outcome.CORRECT, Robot.NAO),
    ConditionLabel(Outcome.ERROR, Robot.NOHU),
    ConditionLabel(Outcome.CORRECT, Robot.NOHU),
)


def make_recording(data, fs=250.0, onsets=(), conditions=None, names=None) -> Recording:
    data = np.asarray(data)
    conditions = conditions or [FOUR_CONDITIONS[k % 4] for k in range(len(onsets))]
    names = names or [f"C{c}" for c in range(data.shape[0])]
    events = [EventMarker(int(onset), cond) for onset, cond in zip(onsets, conditions)]
    return Recording(data=data, sample_rate_hz=fs, channel_names=tuple(names), events=tuple(events))


def make_trialset(trials, labels, fs=10.0, conditions=()) -> TrialSet:
    trials = np.asarray(trials, dtype=np.float64)
    return TrialSet(trials=trials, labels=labels, sample_rate_hz=fs,
                    interval=(0.0, trials.shape[2] / fs), conditions=conditions)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def four_condition_trials():
    trials = np.arange(4 * 2 * 5, dtype=np.float64).reshape(4, 2, 5)
    return make_trialset(trials, [1, 0, 1, 0], fs=5.0, conditions=FOUR_CONDITIONS)
