import hashlib
import json
import random
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable, List, Optional, TypeVar, Union

import numpy as np
import torch

from .logging_config import get_logger

logger = get_logger(__name__)

T = TypeVar('T')
R = TypeVar('R')


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global generators"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def array_digest(array: np.ndarray) -> str:
    """sha256 of the float64 bytes of an array"""
    return hashlib.sha256(np.ascontiguousarray(array, dtype=np.float64).tobytes()).hexdigest()


def ordered_map(func: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """Map over items, optionally on a thread pool; results keep input order"""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, datetime):
        return value.isoformat()
    return str(value)


def safe_json_dump(data: Any, filepath: Union[str, Path]) -> bool:
    """Safely dump data to JSON file"""
    try:
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, default=_json_default)
        logger.debug(f'Data saved to {filepath}')
        return True
    except OSError as e:
        logger.error(f'Failed to save data to {filepath}: {e}')
        return False


def safe_json_load(filepath: Union[str, Path]) -> Optional[Any]:
    """Safely load data from JSON file"""
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            data = json.load(f)
        logger.debug(f'Data loaded from {filepath}')
        return data
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f'Failed to load data from {filepath}: {e}')
        return None


def format_table(headers: List[str], rows: List[List[Any]], precision: int = 3) -> str:
    """Plain aligned text table"""
    cells = [[f'{v:.{precision}f}' if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    lines = ['  '.join(h.ljust(w) for h, w in zip(headers, widths)),
             '  '.join('-' * w for w in widths)]
    lines += ['  '.join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return '\n'.join(lines)
