import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "MESHDRR_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_bands(fn, n_rows, threads=None, band=None):
    """Call ``fn(row0, row1)`` over row blocks, possibly on several threads.

    With ``band`` given the blocks have that fixed height regardless of the
    thread count; otherwise the rows are split into one block per thread.
    Returns the per-block results in row order.
    """
    threads = threads or default_threads()
    if band is None:
        band = -(-n_rows // threads)
    blocks = [(r, min(r + band, n_rows)) for r in range(0, n_rows, max(band, 1))]
    if threads == 1 or len(blocks) == 1:
        return [fn(a, b) for a, b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), blocks))
