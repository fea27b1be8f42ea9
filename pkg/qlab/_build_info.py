"""Build metadata for CLI version reporting."""

BUILD_COMMIT = "unknown"
