__all__ = []  # type: ignore
