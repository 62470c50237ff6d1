namespace cva {}
