"""KernelNorm and kernel-normalized convolution on a small numpy autodiff core."""
