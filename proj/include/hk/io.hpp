#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hk/bnn.hpp"
#include "hk/hklearn.hpp"
#include "hk/nn.hpp"
#include "hk/tensor.hpp"

namespace hk::io {

using nlohmann::json;

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---- CSV ----

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    void write(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write " + path);
        for (std::size_t i = 0; i < header.size(); ++i)
            out << header[i] << (i + 1 < header.size() ? "," : "");
        out << "\n";
        for (const auto& row : rows) {
            for (std::size_t i = 0; i < row.size(); ++i)
                out << fmt17(row[i]) << (i + 1 < row.size() ? "," : "");
            out << "\n";
        }
        if (!out) throw std::runtime_error("write failed for " + path);
    }

    static Csv read(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot read " + path);
        Csv csv;
        std::string line;
        if (!std::getline(in, line)) throw std::runtime_error("empty csv: " + path);
        std::stringstream hs(line);
        std::string cell;
        while (std::getline(hs, cell, ',')) csv.header.push_back(cell);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::stringstream ls(line);
            std::vector<double> row;
            while (std::getline(ls, cell, ',')) {
                // strtod instead of stod: subnormal kernel tails are valid data
                const char* s = cell.c_str();
                char* end = nullptr;
                double v = std::strtod(s, &end);
                if (end == s) throw std::runtime_error("bad number '" + cell + "' in " + path);
                row.push_back(v);
            }
            csv.rows.push_back(std::move(row));
        }
        return csv;
    }
};

// dataset files: header row, feature columns then the target column
inline svgd::Dataset load_dataset_csv(const std::string& path) {
    Csv csv = Csv::read(path);
    if (csv.header.size() < 2) throw std::runtime_error("dataset needs >= 2 columns: " + path);
    std::size_t d = csv.header.size() - 1;
    svgd::Dataset out;
    out.X = Tensor::zeros({csv.rows.size(), d});
    out.y.resize(csv.rows.size());
    for (std::size_t i = 0; i < csv.rows.size(); ++i) {
        if (csv.rows[i].size() != d + 1)
            throw std::runtime_error("ragged dataset row in " + path);
        for (std::size_t c = 0; c < d; ++c) out.X.at(i, c) = csv.rows[i][c];
        out.y[i] = csv.rows[i][d];
    }
    return out;
}

inline void save_dataset_csv(const svgd::Dataset& data, const std::string& path) {
    Csv csv;
    for (std::size_t c = 0; c < data.X.cols(); ++c)
        csv.header.push_back("x" + std::to_string(c));
    csv.header.push_back("y");
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::vector<double> row;
        for (std::size_t c = 0; c < data.X.cols(); ++c) row.push_back(data.X.at(i, c));
        row.push_back(data.y[i]);
        csv.rows.push_back(std::move(row));
    }
    csv.write(path);
}

// ---- trajectory / metrics exports ----

inline void write_trajectory_csv(const hklearn::Trajectory& traj, const std::string& path) {
    Csv csv;
    csv.header = {"step", "objective", "entropy", "wasserstein", "penalty"};
    int step = 0;
    for (const auto& p : traj.points)
        csv.rows.push_back({double(++step), p.objective, p.entropy, p.wasserstein, p.penalty});
    csv.write(path);
}

// ---- parameter store serialization (flat named arrays) ----

inline json params_to_json(const autodiff::ParamStore& store) {
    json arr = json::array();
    for (const auto& [name, t] : store.values) {
        json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["data"] = t.data;
        arr.push_back(std::move(e));
    }
    return json{{"params", std::move(arr)}};
}

inline void save_params(const autodiff::ParamStore& store, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << params_to_json(store).dump(2) << "\n";
}

inline autodiff::ParamStore load_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    json j;
    in >> j;
    autodiff::ParamStore store;
    for (const auto& e : j.at("params")) {
        Tensor t(e.at("shape").get<std::vector<std::size_t>>(),
                 e.at("data").get<std::vector<double>>());
        store.add(e.at("name").get<std::string>(), std::move(t));
    }
    return store;
}

// ---- run manifest ----

struct RunManifest {
    json config;
    std::string code_version = "hk 0.1.0";
    double wallclock_s = 0.0;
    std::vector<std::string> files;

    void write(const std::string& path) const {
        for (const auto& f : files)
            if (!std::filesystem::exists(f))
                throw std::runtime_error("manifest lists missing file: " + f);
        json j;
        j["config"] = config;
        j["code_version"] = code_version;
        j["wallclock_s"] = wallclock_s;
        j["files"] = files;
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write " + path);
        out << j.dump(2) << "\n";
    }
};

inline json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("bad json in " + path + ": " + e.what());
    }
    return j;
}

inline void write_json(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
}

}  // namespace hk::io
