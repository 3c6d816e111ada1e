"""Data package: workload generation, traces and shipped experiment fixtures"""
