// placeholder; filled in with the run harness
