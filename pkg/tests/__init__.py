"""Tests for luknet."""
