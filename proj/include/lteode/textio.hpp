#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

// Small text helpers shared by the CSV readers and writers.
namespace lteode {

std::string_view trim(std::string_view s);
std::vector<std::string> split_csv_line(std::string_view line);

/// Shortest decimal form that parses back to the identical double.
std::string format_double(double value);

// `where` prefixes the ParseError message (e.g. "file.csv:12").
double parse_double(std::string_view cell, const std::string& where);
std::size_t parse_index(std::string_view cell, const std::string& where);

void write_text_file(const std::filesystem::path& path, const std::string& contents);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace lteode
