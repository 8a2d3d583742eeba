# Core components