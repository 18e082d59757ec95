// vlmprobe: command-line front end. Errors are reported on stderr as a single
// JSON object {"error": {"kind": ..., "message": ...}} with a nonzero exit.

#include <cstdio>
#include <exception>
#include <iostream>
#include <json.hpp>
#include <string>

#include "commands.hpp"
#include "vlmprobe/error.hpp"

namespace {

int report_error(const std::string& kind, const std::string& message, int code) {
  nlohmann::json j{{"error", {{"kind", kind}, {"message", message}}}};
  std::cerr << j.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probes for positional sensitivity of vision tokens in RoPE decoders"};
  app.require_subcommand(1);
  vlmprobe::cli::register_commands(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), 2);
  } catch (const vlmprobe::cli::CheckFailed& e) {
    return report_error("check_failed", e.what(), 1);
  } catch (const vlmprobe::Error& e) {
    return report_error(std::string(vlmprobe::to_string(e.kind())), e.what(), 1);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 1);
  }
  return 0;
}
