#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "kiest/error.hpp"
#include "kiest/numerics/checkpoint.hpp"

namespace kiest::cli {

// Git object id of a blob: SHA-1 over "blob <size>\0" + content.
inline std::string git_blob_hash(const std::string& content) {
    const std::string data = "blob " + std::to_string(content.size()) + '\0' + content;
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("SHA-1 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

class Manifest {
public:
    Manifest(std::string command, std::vector<std::string> argv) : started_(utc_now()) {
        doc_["command"] = std::move(command);
        doc_["argv"] = std::move(argv);
        doc_["cwd"] = std::filesystem::current_path().string();
    }

    void config(const nlohmann::ordered_json& c) {
        doc_["config"] = c;
        if (c.contains("seed")) doc_["seed"] = c.at("seed");
    }

    void input(const std::string& role, const std::string& path) {
        doc_["inputs"][role] = {{"path", path}, {"sha1", git_blob_hash(read_file(path))}};
    }

    void output(const std::string& role, const std::string& path) {
        doc_["outputs"][role] = {{"path", path}, {"sha1", git_blob_hash(read_file(path))}};
    }

    void note(const std::string& key, nlohmann::ordered_json v) { doc_["results"][key] = std::move(v); }

    void write(const std::string& path) {
        doc_["started"] = started_;
        doc_["finished"] = utc_now();
        write_file(path, doc_.dump(2) + "\n");
    }

private:
    nlohmann::ordered_json doc_;
    std::string started_;
};

}  // namespace kiest::cli
