// Writes the golden fixtures into a directory (default: tests/golden).

#include <filesystem>
#include <fstream>
#include <iostream>

#include "golden_cases.hpp"

int main(int argc, char** argv) {
  std::filesystem::path dir = argc > 1 ? argv[1] : "tests/golden";
  std::filesystem::create_directories(dir);
  for (const auto& [name, bytes] : insitu::golden::files()) {
    std::ofstream out(dir / name, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    std::cout << name << " " << bytes.size() << " bytes\n";
  }
  return 0;
}
