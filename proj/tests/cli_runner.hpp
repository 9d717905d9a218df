#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>
#include <sys/wait.h>

namespace lftest {

struct CliResult {
  int status = -1;
  std::string out;  // stdout only
};

// Runs the CLI with `args` appended (already shell-quoted) and an optional
// environment prefix such as "LESIONFORGE_SEED=3".
inline CliResult run_cli(const std::string& args, const std::string& env = "") {
  std::string cmd = env.empty() ? "env -u LESIONFORGE_SEED " : "env " + env + " ";
  cmd += std::string("'") + LESIONFORGE_CLI + "' " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) throw std::runtime_error("popen failed: " + cmd);
  CliResult r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

}  // namespace lftest
