"""Small shared helpers: atomic file writes and thread-count policy."""

from __future__ import annotations

import os
import tempfile


def atomic_write(path: str, data: bytes) -> None:
    """Write ``data`` to ``path`` so readers never observe a partial file.

    The bytes go to a temp file in the destination directory first and are
    moved into place with os.replace, which is atomic on POSIX and Windows.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def worker_count() -> int:
    """Worker budget for parallel sections.

    FINED_THREADS caps the count when set (minimum 1); otherwise the machine's
    CPU count is used.
    """
    avail = os.cpu_count() or 1
    raw = os.environ.get("FINED_THREADS")
    if raw is None or not raw.strip():
        return avail
    try:
        requested = int(raw)
    except ValueError:
        return avail
    return max(1, min(requested, avail))
