"""Tools package: latency and memory models, batch policies, engine and metrics"""
