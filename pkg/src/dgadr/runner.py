"""Bounded-concurrency executor for independent experiment runs."""

from __future__ import annotations

import asyncio
from collections.abc import Callable
from typing import Any

from loguru import logger

RunKey = Any


class ExperimentRunner:
    """Registry of named runs executed on worker threads.

    Run keys must be mutually orderable; results come back in key order.
    Each run is a zero-argument callable with no shared mutable state. At most
    ``jobs`` runs execute at once; results are returned to the caller, which is
    the only place that writes output files.
    """

    def __init__(self, jobs: int = 1):
        """Initialize the runner.

        Args:
            jobs: Maximum number of runs executing concurrently
        """
        if jobs < 1:
            msg = f"jobs must be >= 1, got {jobs}"
            raise ValueError(msg)
        self.jobs = jobs
        self.runs: dict[RunKey, Callable[[], Any]] = {}
        self.logger = logger.bind(component=self.__class__.__name__)

    def add_run(self, key: RunKey, run: Callable[[], Any]) -> None:
        if key in self.runs:
            msg = f"Run already registered: {key}"
            raise ValueError(msg)
        self.runs[key] = run
        self.logger.debug("Added run: {}", key)

    def remove_run(self, key: RunKey) -> Callable[[], Any] | None:
        """Remove a run; returns it, or None if it was not registered."""
        run = self.runs.pop(key, None)
        if run is not None:
            self.logger.debug("Removed run: {}", key)
        return run

    def get_run(self, key: RunKey) -> Callable[[], Any] | None:
        return self.runs.get(key)

    def list_runs(self) -> list[RunKey]:
        return list(self.runs)

    async def execute(self, key: RunKey) -> Any:
        """Execute one registered run on a worker thread.

        Raises:
            ValueError: If the run is not registered
        """
        run = self.get_run(key)
        if run is None:
            msg = f"Run not found: {key}"
            raise ValueError(msg)
        self.logger.info("Executing run: {}", key)
        return await asyncio.to_thread(run)

    async def execute_all(self) -> dict[RunKey, Any]:
        """Execute every run, at most ``jobs`` at a time.

        The first failing run cancels the rest and its exception propagates.
        """
        semaphore = asyncio.Semaphore(self.jobs)

        async def bounded(key: RunKey) -> tuple[RunKey, Any]:
            async with semaphore:
                return key, await self.execute(key)

        keys = sorted(self.runs)
        tasks = [asyncio.create_task(bounded(key)) for key in keys]
        try:
            pairs = await asyncio.gather(*tasks)
        except BaseException:
            for task in tasks:
                task.cancel()
            raise
        return dict(pairs)

    def run_all(self) -> dict[RunKey, Any]:
        """Synchronous entry point for ``execute_all``."""
        return asyncio.run(self.execute_all())
