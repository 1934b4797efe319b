"""TPC-C-lite workload, benchmark runner, hop audit and CLI."""
