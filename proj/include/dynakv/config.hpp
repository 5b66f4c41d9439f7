#pragma once

#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dynakv {

// Flat `key = value` config text: one key per line, '#' starts a comment.
// Consumers pull typed values; anything left unread is an unknown key and
// rejected by finish().
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::istream& is, const std::string& origin = "<config>") {
        KeyValueConfig kv;
        kv.origin_ = origin;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos) {
                throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                         ": expected key = value");
            }
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty()) {
                throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            if (kv.values_.count(key)) {
                throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                         ": duplicate key '" + key + "'");
            }
            kv.values_[key] = value;
        }
        return kv;
    }

    static KeyValueConfig parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open config file: " + path);
        return parse(f, path);
    }

    static KeyValueConfig parse_string(const std::string& text,
                                       const std::string& origin = "<string>") {
        std::istringstream is(text);
        return parse(is, origin);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& dflt) {
        consumed_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            std::size_t pos = 0;
            const std::uint64_t v = std::stoull(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw std::runtime_error(origin_ + ": key '" + key + "': expected integer, got '" +
                                     it->second + "'");
        }
    }

    double get_double(const std::string& key, double dflt) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw std::runtime_error(origin_ + ": key '" + key + "': expected number, got '" +
                                     it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool dflt) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        if (it->second == "1" || it->second == "true" || it->second == "yes") return true;
        if (it->second == "0" || it->second == "false" || it->second == "no") return false;
        throw std::runtime_error(origin_ + ": key '" + key + "': expected boolean, got '" +
                                 it->second + "'");
    }

    // Unknown keys are configuration mistakes; reject them loudly.
    void finish() const {
        std::string unknown;
        for (const auto& [key, value] : values_) {
            if (!consumed_.count(key)) {
                if (!unknown.empty()) unknown += ", ";
                unknown += key;
            }
        }
        if (!unknown.empty()) {
            throw std::runtime_error(origin_ + ": unknown keys: " + unknown);
        }
    }

    void override_value(const std::string& key, const std::string& value) {
        values_[key] = value;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::string origin_;
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

}  // namespace dynakv
