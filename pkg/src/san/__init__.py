"""Siamese dropout-consistency training for hybrid CTC/attention recognizers."""
