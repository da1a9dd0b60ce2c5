"""Sandbox worker. Runs as a standalone script in a fresh interpreter.

argv: program_path scratch_dir memory_bytes cpu_seconds takes_symbols
stdin: symbols as JSON. Writes one JSON object to the original stdout:
{status, return, stdout, exc, duration}.
"""

import io
import json
import os
import sys
import time
import traceback


def _limit(memory_bytes, cpu_seconds):
    try:
        import resource
    except ImportError:
        return
    if memory_bytes > 0:
        resource.setrlimit(resource.RLIMIT_AS, (memory_bytes, memory_bytes))
    if cpu_seconds > 0:
        resource.setrlimit(resource.RLIMIT_CPU, (cpu_seconds, cpu_seconds + 1))


_WRITE_EVENTS = {
    "os.remove", "os.rmdir", "os.rename", "os.mkdir", "os.truncate", "os.chmod",
    "os.chown", "os.link", "os.symlink", "os.utime", "shutil.rmtree", "shutil.move",
}
_DENY_PREFIXES = ("socket.", "subprocess.", "os.system", "os.exec", "os.posix_spawn",
                  "os.spawn", "os.fork", "os.forkpty", "os.kill", "os.killpg", "pty.")


def _install_guard(scratch):
    scratch = os.path.realpath(scratch)

    def inside(path):
        if isinstance(path, int):
            return True
        try:
            p = os.path.realpath(os.fsdecode(path))
        except Exception:
            return False
        return p == scratch or p.startswith(scratch + os.sep)

    def hook(event, args):
        if event.startswith(_DENY_PREFIXES):
            raise PermissionError(f"sandbox: {event} is not permitted")
        if event == "open":
            path, mode, flags = args
            writing = (mode and any(c in mode for c in "wax+")) or (
                flags is not None and flags & (os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_TRUNC)
            )
            if writing and not inside(path):
                raise PermissionError(f"sandbox: writing {path!r} is not permitted")
        elif event in _WRITE_EVENTS:
            for a in args[:2]:
                if isinstance(a, (str, bytes, os.PathLike)) and not inside(a):
                    raise PermissionError(f"sandbox: {event} on {a!r} is not permitted")

    sys.addaudithook(hook)


def main():
    # the worker's own directory is the package source; keep it off the import path
    sys.path.pop(0)
    program_path, scratch, memory_bytes, cpu_seconds, takes_symbols = sys.argv[1:6]
    out_fd = os.dup(1)
    devnull = os.open(os.devnull, os.O_WRONLY)
    os.dup2(devnull, 1)
    result = {"status": "ok", "return": None, "stdout": "", "exc": "", "duration": 0.0}

    def emit():
        os.write(out_fd, json.dumps(result, ensure_ascii=False, allow_nan=False).encode("utf-8"))

    try:
        symbols = json.loads(sys.stdin.read())
        with open(program_path, encoding="utf-8") as f:
            source = f.read()
        code = compile(source, "<program>", "exec")
    except SyntaxError as e:
        result.update(status="harness_error", exc=f"SyntaxError: {e.msg} (line {e.lineno})")
        emit()
        return
    except Exception as e:
        result.update(status="harness_error", exc=f"worker startup failed: {e!r}")
        emit()
        return

    os.chdir(scratch)
    _limit(int(memory_bytes), int(cpu_seconds))
    _install_guard(scratch)
    buf = io.StringIO()
    sys.stdout = buf
    start = time.perf_counter()
    namespace = {"__name__": "__sandbox__", "__builtins__": __builtins__}
    try:
        exec(code, namespace)
        solve = namespace.get("solve")
        if not callable(solve):
            result.update(status="harness_error", exc="program does not define a callable `solve`")
        else:
            value = solve(symbols) if takes_symbols == "1" else solve()
            try:
                json.dumps(value, allow_nan=False)
                result["return"] = value
            except (TypeError, ValueError) as e:
                result.update(
                    status="harness_error",
                    exc=(f"return value of type {type(value).__name__} is not JSON-serializable ({e}); "
                         "return a string, number, boolean, or a list/dict of those"),
                )
    except MemoryError:
        result.update(status="resource_exhausted", exc="MemoryError: memory limit exceeded")
    except BaseException:
        etype, evalue, tb = sys.exc_info()
        # drop the worker's own frame
        result.update(status="exception", exc="".join(traceback.format_exception(etype, evalue, tb.tb_next)))
    result["duration"] = time.perf_counter() - start
    sys.stdout = sys.__stdout__
    result["stdout"] = buf.getvalue()
    try:
        emit()
    except MemoryError:
        result.update(status="resource_exhausted", stdout="", **{"return": None})
        emit()


if __name__ == "__main__":
    main()
