"""Span-extraction QA heads over frozen token embeddings.

The heavy lifting lives in the compiled ``_spanqa`` extension; this package
re-exports it and adds the embedding exporter.
"""

from ._spanqa import *  # noqa: F401,F403
from ._spanqa import SpanqaError, __doc__  # noqa: F401

__version__ = "0.1.0"
