"""Pipeline, quality, benchmark and diversity services."""
