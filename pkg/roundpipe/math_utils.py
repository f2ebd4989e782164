import logging
from typing import List

logger = logging.getLogger(__name__)

NS_PER_SECOND = 1_000_000_000


def to_ns(seconds: float) -> int:
    """
    Convert seconds to integer nanoseconds, rounding half to even.
    :param seconds: duration in seconds
    :return: duration in nanoseconds
    """
    return int(round(seconds * NS_PER_SECOND))


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def divisors(n: int) -> List[int]:
    """
    :param n: positive integer
    :return: all divisors of n, ascending
    """
    return [d for d in range(1, n + 1) if n % d == 0]


def prefix_sums(values: List[int]) -> List[int]:
    """
    :param values: list of numbers
    :return: list of length len(values) + 1 with result[i] = sum(values[:i])
    """
    result = [0]
    for v in values:
        result.append(result[-1] + v)
    return result


class StateSpaceCapExceeded(Exception):
    """Raised by exhaustive searches whose instance is larger than they are allowed to explore."""
