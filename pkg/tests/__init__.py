"""Tests for scenepipe."""
