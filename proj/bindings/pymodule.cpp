#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "truckcast/dtw.hpp"
#include "truckcast/ensemble.hpp"
#include "truckcast/geo.hpp"
#include "truckcast/pipeline.hpp"

namespace py = pybind11;
using namespace truckcast;

namespace {

std::vector<py::dict> py_detect_stay_points(
    const std::vector<std::tuple<std::int64_t, double, double>>& points, double delta_m,
    std::int64_t theta_s, std::int64_t max_gap_s) {
    Trajectory tr;
    tr.truck_id = "py";
    for (const auto& [t, lat, lon] : points) tr.points.push_back({t, lat, lon});
    std::sort(tr.points.begin(), tr.points.end(),
              [](const TrajectoryPoint& a, const TrajectoryPoint& b) { return a.t < b.t; });
    StayPointParams params;
    params.delta_m = delta_m;
    params.theta_s = theta_s;
    params.max_gap_s = max_gap_s;
    std::vector<py::dict> out;
    for (const auto& sp : detect_stay_points(tr, params)) {
        py::dict d;
        d["t_start"] = sp.t_start;
        d["t_end"] = sp.t_end;
        d["anchor_lat"] = sp.anchor_lat;
        d["anchor_lon"] = sp.anchor_lon;
        d["centroid_lat"] = sp.centroid_lat;
        d["centroid_lon"] = sp.centroid_lon;
        d["n_points"] = sp.n_points;
        out.push_back(std::move(d));
    }
    return out;
}

py::dict py_build_grid(double lat_min, double lon_min, double lat_max, double lon_max,
                       double cell_size_m) {
    GridSpec g = build_grid({lat_min, lon_min, lat_max, lon_max}, cell_size_m);
    py::dict d;
    d["origin_lat"] = g.origin_lat;
    d["origin_lon"] = g.origin_lon;
    d["cell_size_m"] = g.cell_size;
    d["n_rows"] = g.n_rows;
    d["n_cols"] = g.n_cols;
    d["ref_lat"] = g.ref_lat;
    return d;
}

GridSpec grid_from_dict(const py::dict& d) {
    GridSpec g;
    g.origin_lat = d["origin_lat"].cast<double>();
    g.origin_lon = d["origin_lon"].cast<double>();
    g.cell_size = d["cell_size_m"].cast<double>();
    g.n_rows = d["n_rows"].cast<int>();
    g.n_cols = d["n_cols"].cast<int>();
    g.ref_lat = d["ref_lat"].cast<double>();
    return g;
}

py::object py_locate(const py::dict& grid, double lat, double lon) {
    auto cell = locate(grid_from_dict(grid), lat, lon);
    if (!cell) return py::none();
    return py::int_(*cell);
}

py::tuple py_soft_vote(const std::vector<std::vector<std::array<double, 3>>>& per_model,
                       const std::array<double, 4>& weights) {
    std::vector<ProbTensor> tensors;
    for (const auto& rows : per_model) {
        ProbTensor pt;
        pt.rows = rows;
        for (std::size_t i = 0; i < rows.size(); ++i)
            pt.keys.emplace_back(static_cast<int>(i), 0);
        tensors.push_back(std::move(pt));
    }
    EnsembleConfig cfg;
    cfg.weights = weights;
    ProbTensor fused = soft_vote(tensors, cfg);
    return py::make_tuple(fused.rows, predict_classes(fused));
}

py::dict py_prf(const std::vector<int>& pred, const std::vector<int>& truth) {
    auto rep = prf(confusion_matrix(pred, truth));
    py::dict d;
    py::list precision, recall, f1;
    for (int c = 0; c < 3; ++c) {
        precision.append(rep.per_class[c].precision);
        recall.append(rep.per_class[c].recall);
        f1.append(rep.per_class[c].f1);
    }
    d["precision"] = precision;
    d["recall"] = recall;
    d["f1"] = f1;
    d["macro_f1"] = rep.macro_f1;
    return d;
}

std::string py_run_pipeline(const std::string& config_json) {
    PipelineConfig cfg = config_from_json(nlohmann::json::parse(config_json));
    run_pipeline(cfg);
    std::ifstream in(cfg.out_dir + "/evaluate/metrics.json");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string py_default_config() { return config_to_json(default_fixture_config()).dump(2); }

std::string py_generate_trajectories(const std::string& config_json, const std::string& csv_path) {
    PipelineConfig cfg = config_from_json(nlohmann::json::parse(config_json));
    SynthResult res = generate(cfg.world);
    write_trajectories_csv(csv_path, res.trajectories);
    nlohmann::json stats;
    stats["trucks"] = cfg.world.n_trucks;
    stats["dwells"] = res.truth.dwells.size();
    std::size_t points = 0;
    for (const auto& tr : res.trajectories) points += tr.points.size();
    stats["points"] = points;
    return stats.dump();
}

}  // namespace

PYBIND11_MODULE(_truckcast, m) {
    m.doc() = "Truck GPS traces to grid-level activity predictions";
    m.attr("__version__") = kVersion;

    m.def("haversine", &haversine, py::arg("lat1"), py::arg("lon1"), py::arg("lat2"),
          py::arg("lon2"), "Great-circle distance in meters.");
    m.def("detect_stay_points", &py_detect_stay_points, py::arg("points"),
          py::arg("delta_m") = 200.0, py::arg("theta_s") = 600, py::arg("max_gap_s") = 1800,
          "Stay points of one truck's (t, lat, lon) samples.");
    m.def("build_grid", &py_build_grid, py::arg("lat_min"), py::arg("lon_min"),
          py::arg("lat_max"), py::arg("lon_max"), py::arg("cell_size_m") = 1000.0);
    m.def("locate", &py_locate, py::arg("grid"), py::arg("lat"), py::arg("lon"),
          "Cell index for a point, or None outside the grid.");
    m.def(
        "exact_dtw",
        [](const std::vector<double>& x, const std::vector<double>& y) { return exact_dtw(x, y); },
        py::arg("x"), py::arg("y"));
    m.def(
        "fast_dtw",
        [](const std::vector<double>& x, const std::vector<double>& y, int radius) {
            return fast_dtw(x, y, radius);
        },
        py::arg("x"), py::arg("y"), py::arg("radius") = 1);
    m.def("label_of", &label_of, py::arg("count"), py::arg("medium_bound") = 4,
          "Activity level 0/1/2 for a stay-point count.");
    m.def("soft_vote", &py_soft_vote, py::arg("per_model"),
          py::arg("weights") = std::array<double, 4>{1.1, 1.1, 0.5, 1.3},
          "Fused simplex rows and argmax classes (ties toward the higher class).");
    m.def("prf", &py_prf, py::arg("pred"), py::arg("truth"),
          "Per-class precision/recall/F1 and macro F1.");
    m.def("default_fixture_config", &py_default_config,
          "The built-in synthetic fixture configuration as JSON.");
    m.def("generate_trajectories", &py_generate_trajectories, py::arg("config_json"),
          py::arg("csv_path"), "Write a synthetic trajectory CSV; returns stats JSON.");
    m.def("run_pipeline", &py_run_pipeline, py::arg("config_json"),
          "Run every stage; returns the metrics JSON.");
}
