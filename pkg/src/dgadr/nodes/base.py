"""Base node for the command pipelines."""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any

from loguru import logger

from dgadr.exceptions import DgadrError

Store = dict[str, Any]


class BaseNode(ABC):
    """Base class for all pipeline nodes.

    Implements the three-phase lifecycle:
    1. prep() - Validate the store and load inputs
    2. exec() - Do the work
    3. post() - Write outputs and set the transition action

    Any exception raised inside a phase is recorded in the store as
    ``action = "error"`` together with the message and the failing node.
    """

    def __init__(self, name: str | None = None):
        """Initialize the node with an optional name."""
        self.name = name or self.__class__.__name__
        self.logger = logger.bind(node=self.name)

    def prep(self, store: Store) -> Store:
        """Preparation phase - validate inputs and set up.

        Args:
            store: The shared state dictionary

        Returns:
            Updated store dictionary
        """
        self.logger.debug("Preparing {}", self.name)
        return store

    @abstractmethod
    def exec(self, store: Store) -> Store:
        """Execution phase - main logic implementation.

        Args:
            store: The shared state dictionary

        Returns:
            Updated store dictionary with results
        """

    def post(self, store: Store) -> Store:
        """Post-processing phase - outputs and transition action.

        Args:
            store: The shared state dictionary

        Returns:
            Final store state
        """
        self.logger.debug("Post-processing {}", self.name)
        if store.get("action") != "error":
            store["action"] = "success"
        return store

    def fail(self, store: Store, message: str) -> Store:
        store["action"] = "error"
        store["error"] = message
        store["error_node"] = self.name
        return store

    def run(self, store: Store) -> Store:
        """Execute the complete node lifecycle: prep -> exec -> post.

        Args:
            store: The shared state dictionary

        Returns:
            Final store state after all phases
        """
        try:
            self.logger.debug("Running {}", self.name)
            store = self.prep(store)

            # Skip execution if prep phase set an error
            if store.get("action") != "error":
                store = self.exec(store)

            store = self.post(store)

            self.logger.debug(
                "Completed {} with action: {}", self.name, store.get("action", "none")
            )
            return store

        except DgadrError as e:
            self.logger.error("{} failed: {}", self.name, e)
            return self.fail(store, str(e))
        except Exception as e:
            self.logger.exception("Unexpected error in {}", self.name)
            return self.fail(store, f"{type(e).__name__}: {e}")


class ValidationMixin:
    """Mixin for common validation patterns."""

    def validate_required_fields(
        self, store: Store, required_fields: list[str]
    ) -> tuple[bool, str | None]:
        """Validate that required fields exist and are not None.

        Returns:
            Tuple of (is_valid, error_message)
        """
        missing_fields = [
            field for field in required_fields if store.get(field) is None
        ]

        if missing_fields:
            return False, f"Missing required fields: {', '.join(missing_fields)}"

        return True, None

    def validate_paths_exist(
        self, store: Store, path_fields: list[str]
    ) -> tuple[bool, str | None]:
        """Validate that the files named by ``path_fields`` exist.

        Fields that are absent or None are skipped.
        """
        for field in path_fields:
            value = store.get(field)
            if value is not None and not Path(value).is_file():
                return False, f"File not found: {value}"

        return True, None
