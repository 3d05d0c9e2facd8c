"""Decision environments built on the channel generators."""
