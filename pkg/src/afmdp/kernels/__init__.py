"""Hot-kernel backend selection.

The compiled extension is used when it imported successfully; otherwise the
NumPy fallback takes over transparently.  AFMDP_PURE=1 forces the fallback.
Both backends are bit-identical by contract (see benchmarks/bench_kernels.py
for the speed comparison).
"""
import os

if os.environ.get("AFMDP_PURE") == "1":
    from . import _pure as _impl
    BACKEND = "pure"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]
        BACKEND = "native"
    except ImportError:
        from . import _pure as _impl
        BACKEND = "pure"

sample_rows = _impl.sample_rows
max_over_actions = _impl.max_over_actions
assemble_next = _impl.assemble_next
table_backup = _impl.table_backup
vrql_step = _impl.vrql_step
