"""Tests for pimbrl_lab."""
