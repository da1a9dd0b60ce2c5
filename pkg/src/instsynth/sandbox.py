"""Isolated execution of generated programs.

Each call to :func:`execute` spawns one worker interpreter with a private
scratch directory, a memory cap, a wall-clock limit and an audit hook that
denies sockets, subprocesses and writes outside the scratch directory. The
hook is a guard rail for accidental damage by generated code, not a
security boundary against a determined adversary.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

from .core import ProgramArtifact, SymbolStore

WORKER_PATH = Path(__file__).with_name("_worker.py")

# No ambient clock/locale/hash-seed dependence leaks into the guest.
_GUEST_ENV = {
    "LC_ALL": "C.UTF-8",
    "LANG": "C.UTF-8",
    "TZ": "UTC",
    "PYTHONHASHSEED": "0",
    "OPENBLAS_NUM_THREADS": "1",
    "OMP_NUM_THREADS": "1",
    "MKL_NUM_THREADS": "1",
    "PATH": "/usr/bin:/bin",
}


class RunStatus(str, Enum):
    OK = "ok"
    EXCEPTION = "exception"
    TIMEOUT = "timeout"
    RESOURCE_EXHAUSTED = "resource_exhausted"
    HARNESS_ERROR = "harness_error"


@dataclass(frozen=True)
class ExecLimits:
    wall_seconds: float = 10.0
    memory_bytes: int = 512 * 2**20
    network_allowed: bool = False

    def __post_init__(self):
        if not self.wall_seconds > 0:
            raise ValueError("wall_seconds must be positive")
        if self.network_allowed:
            raise ValueError("network access cannot be enabled")


@dataclass(frozen=True)
class RunOutcome:
    status: RunStatus
    return_value: Any = None
    stdout: str = ""
    exception_text: str = ""
    duration_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status is RunStatus.OK

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "status": self.status.value,
            "return": self.return_value,
            "stdout": self.stdout,
            "exc": self.exception_text,
        }
        if timing:
            d["duration"] = self.duration_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunOutcome":
        return cls(RunStatus(d["status"]), d.get("return"), d.get("stdout", ""), d.get("exc", ""),
                   float(d.get("duration", 0.0)))


@dataclass
class Sandbox:
    """Executes programs; ``interpreter`` is the guest command.

    The default skips user site-packages and bytecode writes. It does not use
    isolated mode because that would ignore the fixed PYTHONHASHSEED; the
    guest environment is replaced wholesale instead.
    """

    interpreter: Sequence[str] = field(default_factory=lambda: (sys.executable, "-s", "-B"))
    max_concurrent: int = 8
    calls: int = 0

    def __post_init__(self):
        self._slots = threading.BoundedSemaphore(self.max_concurrent)
        self._count_lock = threading.Lock()

    def execute(self, program: ProgramArtifact, symbols: SymbolStore, limits: ExecLimits = ExecLimits()) -> RunOutcome:
        with self._count_lock:
            self.calls += 1
        with self._slots:
            return _run_worker(list(self.interpreter), program, symbols, limits)


_default_sandbox: Sandbox | None = None


def default_sandbox() -> Sandbox:
    global _default_sandbox
    if _default_sandbox is None:
        _default_sandbox = Sandbox()
    return _default_sandbox


def execute(program: ProgramArtifact, symbols: SymbolStore, limits: ExecLimits = ExecLimits()) -> RunOutcome:
    """Run ``program.entry(symbols)`` in a fresh worker and report what happened."""
    return default_sandbox().execute(program, symbols, limits)


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def _run_worker(cmd: list[str], program: ProgramArtifact, symbols: SymbolStore, limits: ExecLimits) -> RunOutcome:
    scratch = tempfile.mkdtemp(prefix="instsynth-run-")
    start = time.perf_counter()
    try:
        program_path = os.path.join(scratch, "program.py")
        with open(program_path, "w", encoding="utf-8") as f:
            f.write(program.source)
        cpu = math.ceil(limits.wall_seconds) + 1
        argv = cmd + [str(WORKER_PATH), program_path, scratch, str(limits.memory_bytes), str(cpu),
                      "1" if program.takes_symbols else "0"]
        try:
            proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=scratch,
                env=dict(_GUEST_ENV, HOME=scratch, TMPDIR=scratch),
                start_new_session=True,
            )
        except OSError as e:
            return RunOutcome(RunStatus.HARNESS_ERROR, exception_text=f"worker startup failed: {e}",
                              duration_seconds=time.perf_counter() - start)
        try:
            out, err = proc.communicate(symbols.canonical_bytes, timeout=limits.wall_seconds)
        except subprocess.TimeoutExpired:
            _kill_group(proc)
            proc.communicate()
            return RunOutcome(RunStatus.TIMEOUT,
                              exception_text=f"execution exceeded the {limits.wall_seconds:g} s time limit",
                              duration_seconds=time.perf_counter() - start)
        duration = time.perf_counter() - start
        return _decode(out, err, proc.returncode, duration)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def _decode(out: bytes, err: bytes, returncode: int, duration: float) -> RunOutcome:
    try:
        payload = json.loads(out.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        stderr = err.decode("utf-8", "replace")[-2000:]
        if returncode < 0 and -returncode in (signal.SIGKILL, signal.SIGXCPU, signal.SIGSEGV):
            return RunOutcome(RunStatus.RESOURCE_EXHAUSTED,
                              exception_text=f"worker killed by signal {-returncode}\n{stderr}",
                              duration_seconds=duration)
        if "MemoryError" in stderr:
            return RunOutcome(RunStatus.RESOURCE_EXHAUSTED, exception_text=stderr, duration_seconds=duration)
        return RunOutcome(RunStatus.HARNESS_ERROR,
                          exception_text=f"worker exited with code {returncode} without a result\n{stderr}",
                          duration_seconds=duration)
    status = RunStatus(payload["status"])
    return RunOutcome(
        status,
        payload.get("return") if status is RunStatus.OK else None,
        payload.get("stdout", ""),
        payload.get("exc", ""),
        duration,
    )
