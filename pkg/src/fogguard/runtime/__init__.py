"""Multi-process execution of distributed DNNs over TCP."""
