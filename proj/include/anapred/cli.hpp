#pragma once

namespace anapred {

// Full command-line entry point; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace anapred
