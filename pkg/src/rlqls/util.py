"""Small shared runtime helpers."""

import os


def thread_cap(requested: int) -> int:
    """Clamp a worker count by the RLQLS_THREADS environment variable."""
    cap = os.environ.get("RLQLS_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            pass
    return max(1, requested)
