"""Order-preserving thread fan-out."""

from joblib import Parallel, delayed


def parallel_map(fn, items, threads=1):
    """
    Apply fn to every item and return the results in input order.

    Work units must not share mutable state; each one derives its own seed
    stream, which is what keeps results independent of the thread count.
    """
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return Parallel(n_jobs=min(threads, len(items)), prefer='threads')(delayed(fn)(item) for item in items)
