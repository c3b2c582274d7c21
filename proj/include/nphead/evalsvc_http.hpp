#pragma once

#include <memory>
#include <string>

#include <httplib.h>
// <resolv.h> from httplib defines _res, which collides with Eigen internals
#undef _res
#include <json.hpp>

#include "evalsvc.hpp"

namespace nphead::evalsvc {

// Routes:
//   POST /raters                    new anonymous rater token
//   POST /sessions                  (admin) {"items": [...], "seed": n, "criteria"?: s} -> {"session_id"}
//   GET  /sessions/{id}             blinded items
//   POST /sessions/{id}/votes       {"rater_id", "item_id", "option_key"}
//   GET  /sessions/{id}/aggregate   (admin) counts and percentages
//   GET  /healthz
// Admin routes require the X-Admin-Secret header.
class EvalServer {
public:
    EvalServer(SessionStore& store, std::string admin_secret) : store_(store), secret_(std::move(admin_secret)) {
        if (secret_.empty()) throw ConfigError("admin secret must not be empty");
        routes();
    }

    int bind_any(const std::string& host = "127.0.0.1") { return srv_.bind_to_any_port(host); }
    bool bind(const std::string& host, int port) { return srv_.bind_to_port(host, port); }
    bool run() { return srv_.listen_after_bind(); }
    void stop() { srv_.stop(); }
    void wait_until_ready() { srv_.wait_until_ready(); }

private:
    static void send(httplib::Response& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json; charset=utf-8");
    }

    template <class Fn>
    void guarded(httplib::Response& res, Fn&& fn) {
        try {
            fn();
        } catch (const NotFoundError& e) {
            send(res, 404, {{"error", e.what()}});
        } catch (const ValidationError& e) {
            send(res, 400, {{"error", e.what()}});
        } catch (const nlohmann::json::exception& e) {
            send(res, 400, {{"error", std::string("bad request body: ") + e.what()}});
        } catch (const std::exception& e) {
            send(res, 500, {{"error", e.what()}});
        }
    }

    bool admin(const httplib::Request& req, httplib::Response& res) const {
        if (req.get_header_value("X-Admin-Secret") != secret_) {
            send(res, 401, {{"error", "admin secret required"}});
            return false;
        }
        return true;
    }

    void routes() {
        srv_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { send(res, 200, {{"status", "ok"}}); });
        srv_.Post("/raters", [](const httplib::Request&, httplib::Response& res) {
            send(res, 201, {{"rater_id", issue_rater_token()}});
        });
        srv_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
            if (!admin(req, res)) return;
            guarded(res, [&] {
                const auto body = nlohmann::json::parse(req.body);
                const auto s = store_.create(items_from_json(body.at("items")), body.value("seed", std::uint64_t{0}),
                                             body.value("criteria", kDefaultCriteria));
                send(res, 201, {{"session_id", s.session_id}});
            });
        });
        srv_.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { send(res, 200, rater_view(store_.get(req.matches[1]))); });
        });
        srv_.Post(R"(/sessions/([^/]+)/votes)", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto body = nlohmann::json::parse(req.body);
                const auto v = store_.record_vote(req.matches[1], body.at("item_id").get<std::string>(),
                                                  body.at("rater_id").get<std::string>(),
                                                  body.at("option_key").get<std::string>());
                send(res, 201, {{"item_id", v.item_id}, {"option_key", v.option_key}, {"timestamp", v.timestamp}});
            });
        });
        srv_.Get(R"(/sessions/([^/]+)/aggregate)", [this](const httplib::Request& req, httplib::Response& res) {
            if (!admin(req, res)) return;
            guarded(res, [&] { send(res, 200, to_json(store_.aggregate(req.matches[1]))); });
        });
    }

    SessionStore& store_;
    std::string secret_;
    httplib::Server srv_;
};

}  // namespace nphead::evalsvc
